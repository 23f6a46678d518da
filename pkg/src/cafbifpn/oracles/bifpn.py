"""
Direct substitution references for the fusion DAG and the full enhancement + fusion pipeline.

Each node is evaluated in the order it is written out, from loop primitives only.
"""
from typing import Optional, Sequence

import numpy as np

from cafbifpn.cfe import CfeBranch, CfeParams
from cafbifpn.conv import DeformableParams
from cafbifpn.errors import ShapeError
from cafbifpn.oracles.attention import routed_attention_reference
from cafbifpn.oracles.conv import conv2d_reference, deformable_conv2d_reference
from cafbifpn.pyramid import PipelineParams
from cafbifpn.tensor import Tensor

FUSION_SIZES = {"p4f": 2, "p3f": 2, "p2o": 2, "p3o": 3, "p4o": 3, "p5o": 2}


def up2_reference(f: Tensor) -> Tensor:
    channels, height, width = f.shape
    x = f.data.tolist()
    out = [[[x[c][y // 2][xx // 2] for xx in range(2 * width)] for y in range(2 * height)] for c in range(channels)]
    return Tensor(np.array(out), dtype=f.dtype)


def down2_reference(f: Tensor) -> Tensor:
    channels, height, width = f.shape
    if height % 2 or width % 2:
        raise ShapeError(f"down2_reference: odd extents {height}x{width}")
    x = f.data.tolist()
    out = [[[0.0] * (width // 2) for _ in range(height // 2)] for _ in range(channels)]
    for c in range(channels):
        for y in range(height // 2):
            for xx in range(width // 2):
                top, bottom = x[c][2 * y], x[c][2 * y + 1]
                out[c][y][xx] = ((top[2 * xx] + top[2 * xx + 1]) + (bottom[2 * xx] + bottom[2 * xx + 1])) / 4
    return Tensor(np.array(out), dtype=f.dtype)


def fuse_reference(inputs: Sequence[Tensor], raw_weights: Sequence[float], epsilon: float) -> Tensor:
    effective = [max(w, 0.0) for w in raw_weights]
    denominator = sum(effective) + epsilon
    flat = [t.data.reshape(-1).tolist() for t in inputs]
    out = [sum(u * x[i] for u, x in zip(effective, flat)) / denominator for i in range(len(flat[0]))]
    return Tensor(np.array(out).reshape(inputs[0].shape), dtype=inputs[0].dtype)


def _relu(t: Tensor, activation: str) -> Tensor:
    if activation != "relu":
        return t
    values = [v if v > 0 else 0.0 for v in t.data.reshape(-1).tolist()]
    return Tensor(np.array(values).reshape(t.shape), dtype=t.dtype)


def _branch_reference(f: Tensor, branch: CfeBranch, activation: str) -> Tensor:
    x = f
    for conv in (branch.reduce, branch.first, branch.second):
        x = _relu(conv2d_reference(x, conv), activation)
    if isinstance(branch.context, DeformableParams):
        return _relu(deformable_conv2d_reference(x, branch.context), activation)
    return _relu(conv2d_reference(x, branch.context), activation)


def cfe_reference(f: Tensor, p: CfeParams) -> Tensor:
    branches = [_branch_reference(f, b, p.activation).data for b in (p.branch1, p.branch2, p.branch3)]
    residual = conv2d_reference(f, p.residual).data
    return Tensor(np.concatenate(branches, axis=0) + residual, dtype=f.dtype)


def afbifpn_reference(inputs: dict[int, Tensor], params: PipelineParams) -> dict[int, Tensor]:
    """Stage-O maps by direct substitution into the six fusion equations."""
    w = {node: getattr(params.fusion, node).data.tolist() for node in FUSION_SIZES}
    eps = params.fusion.epsilon

    def attend(level: int, f: Tensor) -> Tensor:
        if not params.attention_fusion_enabled:
            return f
        return routed_attention_reference(f, params.bra[level])

    p2i, p3i, p4i, p5i = inputs[2], inputs[3], inputs[4], inputs[5]
    p4f = fuse_reference([p4i, up2_reference(p5i)], w["p4f"], eps)
    a4 = attend(4, p4f)
    p3f = fuse_reference([p3i, up2_reference(a4)], w["p3f"], eps)
    a3 = attend(3, p3f)
    p2o = fuse_reference([p2i, up2_reference(a3)], w["p2o"], eps)
    p3o = fuse_reference([p3i, a3, down2_reference(p2o)], w["p3o"], eps)
    p4o = fuse_reference([p4i, a4, down2_reference(p3o)], w["p4o"], eps)
    p5o = fuse_reference([p5i, down2_reference(p4o)], w["p5o"], eps)
    return {2: p2o, 3: p3o, 4: p4o, 5: p5o}


def c_afbifpn_reference(backbone: dict[int, Tensor], params: PipelineParams) -> dict[int, Tensor]:
    inputs = {}
    for level, f in backbone.items():
        if params.cfe_enabled:
            inputs[level] = cfe_reference(f, params.cfe[level])
        else:
            inputs[level] = conv2d_reference(f, params.projection[level])
    return afbifpn_reference(inputs, params)


def plain_bifpn_reference(
    inputs: dict[int, Tensor], weights: Optional[dict[str, list[float]]] = None, epsilon: float = 0.0
) -> dict[int, Tensor]:
    """The fusion DAG with identity in place of attention; all raw weights 1 unless given."""
    w = weights or {node: [1.0] * n for node, n in FUSION_SIZES.items()}
    p2i, p3i, p4i, p5i = inputs[2], inputs[3], inputs[4], inputs[5]
    p4f = fuse_reference([p4i, up2_reference(p5i)], w["p4f"], epsilon)
    p3f = fuse_reference([p3i, up2_reference(p4f)], w["p3f"], epsilon)
    p2o = fuse_reference([p2i, up2_reference(p3f)], w["p2o"], epsilon)
    p3o = fuse_reference([p3i, p3f, down2_reference(p2o)], w["p3o"], epsilon)
    p4o = fuse_reference([p4i, p4f, down2_reference(p3o)], w["p4o"], epsilon)
    p5o = fuse_reference([p5i, down2_reference(p4o)], w["p5o"], epsilon)
    return {2: p2o, 3: p3o, 4: p4o, 5: p5o}
