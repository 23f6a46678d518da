"""Loop references for token attention: dense attention, top-k selection and routed attention."""
import math
from typing import Sequence

import numpy as np

from cafbifpn.attention import BraParams
from cafbifpn.errors import ConfigError, PartitionError, ShapeError
from cafbifpn.oracles.conv import depthwise_conv2d_reference
from cafbifpn.tensor import Tensor


def topk_reference(row: Sequence[float], k: int) -> list[int]:
    """Indices of the k largest values; equal values keep the lower index first."""
    if not 0 <= k <= len(row):
        raise ConfigError(f"topk_reference: k={k} exceeds row length {len(row)}")
    ranked = sorted(range(len(row)), key=lambda i: (-row[i], i))
    return ranked[:k]


def _project(token: list[float], weights: list[list[float]]) -> list[float]:
    return [sum(token[c] * weights[c][j] for c in range(len(token))) for j in range(len(weights[0]))]


def _attend(query: list[float], keys: list[list[float]], values: list[list[float]], heads: int) -> list[float]:
    """Per-head softmax(q k^T / sqrt(d)) v, heads concatenated."""
    channels = len(query)
    width = channels // heads
    out = []
    for h in range(heads):
        lo, hi = h * width, (h + 1) * width
        logits = [sum(query[c] * key[c] for c in range(lo, hi)) / math.sqrt(width) for key in keys]
        peak = max(logits)
        exps = [math.exp(v - peak) for v in logits]
        total = sum(exps)
        for c in range(lo, hi):
            out.append(sum(exps[t] * values[t][c] for t in range(len(values))) / total)
    return out


def _tokens(f: Tensor) -> tuple[list[list[float]], int, int]:
    x = f.data.tolist()
    channels, height, width = f.shape
    return [[x[c][y][xx] for c in range(channels)] for y in range(height) for xx in range(width)], height, width


def _check_heads(channels: int, p: BraParams) -> None:
    if channels != p.channels:
        raise ShapeError(f"attention reference: map has {channels} channels, projections expect {p.channels}")
    if channels % p.heads:
        raise ConfigError(f"heads={p.heads} must divide C={channels}")


def _to_map(tokens: list[list[float]], height: int, width: int, dtype: str) -> Tensor:
    return Tensor(np.array(tokens).reshape(height, width, -1).transpose(2, 0, 1), dtype=dtype)


def dense_attention_reference(f: Tensor, p: BraParams) -> Tensor:
    """Every token attends to every token of the map; no local context term."""
    _check_heads(f.shape[0], p)
    tokens, height, width = _tokens(f)
    w_q, w_k, w_v = (t.data.tolist() for t in (p.w_q, p.w_k, p.w_v))
    queries = [_project(t, w_q) for t in tokens]
    keys = [_project(t, w_k) for t in tokens]
    values = [_project(t, w_v) for t in tokens]
    out = [_attend(q, keys, values, p.heads) for q in queries]
    return _to_map(out, height, width, f.dtype)


def routed_attention_reference(f: Tensor, p: BraParams) -> Tensor:
    """Region routing by token means and loop top-k, routed token attention, plus the local context term."""
    _check_heads(f.shape[0], p)
    channels, height, width = f.shape
    S = p.regions_per_side
    if height % S or width % S:
        raise PartitionError(f"routed_attention_reference: H={height}, W={width} not divisible by S={S}")
    tokens, _, _ = _tokens(f)
    w_q, w_k, w_v = (t.data.tolist() for t in (p.w_q, p.w_k, p.w_v))
    queries = [_project(t, w_q) for t in tokens]
    keys = [_project(t, w_k) for t in tokens]
    values = [_project(t, w_v) for t in tokens]

    rh, rw = height // S, width // S
    members = [
        [(ry * rh + y) * width + rx * rw + xx for y in range(rh) for xx in range(rw)]
        for ry in range(S)
        for rx in range(S)
    ]

    def mean(vectors: list[list[float]], ids: list[int]) -> list[float]:
        return [sum(vectors[t][c] for t in ids) / len(ids) for c in range(channels)]

    q_region = [mean(queries, ids) for ids in members]
    k_region = [mean(keys, ids) for ids in members]
    out = [None] * len(tokens)
    for r, ids in enumerate(members):
        affinity = [sum(q_region[r][c] * k_region[m][c] for c in range(channels)) for m in range(len(members))]
        routed = [t for m in topk_reference(affinity, p.topk) for t in members[m]]
        for t in ids:
            out[t] = _attend(queries[t], [keys[u] for u in routed], [values[u] for u in routed], p.heads)

    attended = _to_map(out, height, width, f.dtype).data
    local = depthwise_conv2d_reference(_to_map(values, height, width, f.dtype), p.lce_kernel).data
    return Tensor(attended + local, dtype=f.dtype)
