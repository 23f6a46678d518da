import numpy as np

from cafbifpn.errors import ShapeError
from cafbifpn.tensor import Tensor, record_op


def pad_to_multiple(f: Tensor, S: int) -> Tensor:
    """Zero-pad the bottom and right of a [C, H, W] map so that S divides H and W."""
    if f.rank != 3 or S < 1:
        raise ShapeError(f"pad_to_multiple: expected a [C, H, W] map and S >= 1, got dims {f.dims}, S={S}")
    _, height, width = f.shape
    pad_h, pad_w = -height % S, -width % S
    if pad_h == 0 and pad_w == 0:
        return f
    value = np.pad(f.data, ((0, 0), (0, pad_h), (0, pad_w)))
    return record_op("pad", [f], value, lambda g: (g[:, :height, :width],))


def crop_to(f: Tensor, H: int, W: int) -> Tensor:
    """Keep the top-left H x W window of a [C, H', W'] map."""
    if f.rank != 3 or not (1 <= H <= f.shape[1] and 1 <= W <= f.shape[2]):
        raise ShapeError(f"crop_to: cannot crop dims {f.dims} to {H}x{W}")
    if (H, W) == f.shape[1:]:
        return f

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros(f.shape, dtype=g.dtype)
        grad[:, :H, :W] = g
        return (grad,)

    return record_op("crop", [f], f.data[:, :H, :W].copy(), vjp)
