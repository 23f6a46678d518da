from typing import Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, NonNegativeFloat

from cafbifpn.errors import ConfigError, NumericError, ShapeError
from cafbifpn.tensor import Tensor, record_op

ResizeDirection = Literal["up2", "down2"]

DEFAULT_EPSILON = 1e-4


def resize(f: Tensor, direction: ResizeDirection) -> Tensor:
    """Nearest-neighbour 2x up-sampling or 2x2 mean down-sampling of a [C, H, W] map."""
    if f.rank != 3:
        raise ShapeError(f"resize: expected a [C, H, W] feature map, got dims {f.dims}")
    channels, height, width = f.shape
    x = f.data
    if direction == "up2":

        def vjp_up(g: np.ndarray) -> tuple[np.ndarray]:
            return (g.reshape(channels, height, 2, width, 2).sum(axis=(2, 4)),)

        return record_op("up2", [f], np.repeat(np.repeat(x, 2, axis=1), 2, axis=2), vjp_up)

    if direction == "down2":
        if height % 2 or width % 2:
            raise ShapeError(f"resize: down2 needs even extents, got {height}x{width}")
        # pairwise sum keeps down2(up2(f)) == f exactly
        value = ((x[:, 0::2, 0::2] + x[:, 0::2, 1::2]) + (x[:, 1::2, 0::2] + x[:, 1::2, 1::2])) * 0.25

        def vjp_down(g: np.ndarray) -> tuple[np.ndarray]:
            return (np.repeat(np.repeat(g * 0.25, 2, axis=1), 2, axis=2),)

        return record_op("down2", [f], value, vjp_down)

    raise ConfigError(f"unknown resize direction: {direction}")


def fuse(inputs: Sequence[Tensor], raw_weights: Tensor, epsilon: float = DEFAULT_EPSILON) -> Tensor:
    """Fast normalised fusion: sum(u_i * x_i) / (sum(u_i) + epsilon) with u_i = max(w_i, 0)."""
    if not inputs:
        raise ShapeError("fuse: at least one input is required")
    for tensor in inputs[1:]:
        if tensor.dims != inputs[0].dims:
            raise ShapeError(f"fuse: input dims {inputs[0].dims} and {tensor.dims} differ")
    if raw_weights.dims != [len(inputs)]:
        raise ShapeError(f"fuse: {len(inputs)} inputs but weight dims {raw_weights.dims}")

    w = raw_weights.data
    active = w > 0
    u = np.where(active, w, 0.0).astype(inputs[0].data.dtype)
    denominator = float(u.sum()) + epsilon
    if not denominator > 0:
        raise NumericError(f"fuse: non-positive denominator {denominator} for weights {w.tolist()}")
    numerator = u[0] * inputs[0].data
    for weight, tensor in zip(u[1:], inputs[1:]):
        numerator = numerator + weight * tensor.data
    out = numerator / denominator
    # distance of the weights to the clamp kink at zero
    margin = float(np.abs(w).min())

    def vjp(g: np.ndarray) -> list[np.ndarray]:
        grads = [g * (weight / denominator) for weight in u]
        grad_w = np.array(
            [active[i] * float((g * (t.data - out)).sum()) / denominator for i, t in enumerate(inputs)],
            dtype=w.dtype,
        )
        return grads + [grad_w]

    return record_op("fuse", list(inputs) + [raw_weights], out, vjp, margin=margin)


class FusionWeights(BaseModel):
    """Raw per-node fusion scalars, w_ij indexed by output level i and input branch j."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    p4f: Tensor  # w41, w42
    p3f: Tensor  # w31, w32
    p2o: Tensor  # w21, w22
    p3o: Tensor  # w33, w34, w35
    p4o: Tensor  # w43, w44, w45
    p5o: Tensor  # w51, w52
    epsilon: NonNegativeFloat = DEFAULT_EPSILON

    @classmethod
    def constant(cls, value: float = 1.0, epsilon: float = DEFAULT_EPSILON, dtype: str = "float64") -> "FusionWeights":
        sizes = {"p4f": 2, "p3f": 2, "p2o": 2, "p3o": 3, "p4o": 3, "p5o": 2}
        return cls(epsilon=epsilon, **{node: Tensor.full([n], value, dtype=dtype) for node, n in sizes.items()})

    def named(self) -> dict[str, float]:
        """Raw weights under their w_ij names."""
        layout = {"p2o": (2, 1), "p3f": (3, 1), "p3o": (3, 3), "p4f": (4, 1), "p4o": (4, 3), "p5o": (5, 1)}
        result = {}
        for node, (level, first) in sorted(layout.items(), key=lambda item: item[1]):
            for offset, value in enumerate(getattr(self, node).data.tolist()):
                result[f"w{level}{first + offset}"] = value
        return result
