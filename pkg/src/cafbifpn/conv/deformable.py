import math

import numpy as np

from cafbifpn.conv.conv2d import contract_taps, conv2d
from cafbifpn.conv.params import Conv2dParams, DeformableParams
from cafbifpn.errors import NumericError, ShapeError
from cafbifpn.tensor import Tensor, record_op


def bilinear_sample(input: Tensor, y: float, x: float) -> Tensor:
    """Value of every channel at the real-valued location (y, x); outside pixels read as zero."""
    if not (math.isfinite(y) and math.isfinite(x)):
        raise NumericError(f"bilinear_sample: non-finite coordinates ({y}, {x})")
    _, height, width = input.shape
    y0, x0 = math.floor(y), math.floor(x)
    value = np.zeros(input.shape[0], dtype=input.data.dtype)
    for yy in (y0, y0 + 1):
        for xx in (x0, x0 + 1):
            weight = (1.0 - abs(y - yy)) * (1.0 - abs(x - xx))
            if weight != 0.0 and 0 <= yy < height and 0 <= xx < width:
                value = value + weight * input.data[:, yy, xx]
    return Tensor.wrap(value)


class _BilinearGather:
    """Vectorised bilinear reads at positions py, px of shape [T, H, W] from a [C, H, W] array."""

    def __init__(self, source: np.ndarray, py: np.ndarray, px: np.ndarray) -> None:
        _, height, width = source.shape
        self.source = source
        y0, x0 = np.floor(py), np.floor(px)
        ly, lx = py - y0, px - x0
        self.corners = []
        for dy, wy, dwy in ((0, 1.0 - ly, -1.0), (1, ly, 1.0)):
            for dx, wx, dwx in ((0, 1.0 - lx, -1.0), (1, lx, 1.0)):
                yy = y0.astype(np.int64) + dy
                xx = x0.astype(np.int64) + dx
                valid = (yy >= 0) & (yy < height) & (xx >= 0) & (xx < width)
                yy, xx = np.clip(yy, 0, height - 1), np.clip(xx, 0, width - 1)
                self.corners.append((yy, xx, valid, wy, wx, dwy, dwx))

    def sample(self) -> np.ndarray:
        """Sampled values, [C, T, H, W]."""
        result = np.zeros((self.source.shape[0],) + self.corners[0][0].shape, dtype=self.source.dtype)
        for yy, xx, valid, wy, wx, _, _ in self.corners:
            result = result + self.source[:, yy, xx] * (valid * wy * wx)
        return result

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Gradients w.r.t. the source and the two coordinate arrays, given d(loss)/d(sample)."""
        grad_source = np.zeros_like(self.source)
        grad_py = np.zeros(grad.shape[1:], dtype=grad.dtype)
        grad_px = np.zeros(grad.shape[1:], dtype=grad.dtype)
        for yy, xx, valid, wy, wx, dwy, dwx in self.corners:
            np.add.at(grad_source, (slice(None), yy, xx), grad * (valid * wy * wx))
            weighted = (grad * self.source[:, yy, xx]).sum(axis=0) * valid
            grad_py = grad_py + weighted * dwy * wx
            grad_px = grad_px + weighted * wy * dwx
        return grad_source, grad_py, grad_px


def deformable_conv2d_with_offsets(input: Tensor, offsets: Tensor, base: Conv2dParams) -> Tensor:
    """
    Deformable convolution (stride 1, extent-preserving) with externally supplied offsets.

    offsets is [2*T, H, W] with channels (dy_t, dx_t) for each tap t in row-major kernel order.
    """
    if input.rank != 3:
        raise ShapeError(f"deformable_conv2d: expected a [C, H, W] feature map, got dims {input.dims}")
    channels, height, width = input.shape
    if channels != base.in_channels:
        raise ShapeError(f"deformable_conv2d: input has {channels} channels, weights expect {base.in_channels}")
    kh, kw = base.kernel_size
    taps = kh * kw
    if offsets.dims != [2 * taps, height, width]:
        raise ShapeError(f"deformable_conv2d: offsets dims {offsets.dims}, expected {[2 * taps, height, width]}")

    ph, pw = base.padding
    delta = offsets.data.reshape(taps, 2, height, width)
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    tap_y = (np.arange(taps) // kw) * base.dilation - ph
    tap_x = (np.arange(taps) % kw) * base.dilation - pw
    # sample positions share the offsets' dtype
    py = (rows[None] + tap_y[:, None, None]).astype(delta.dtype) + delta[:, 0]
    px = (cols[None] + tap_x[:, None, None]).astype(delta.dtype) + delta[:, 1]
    # sampling is piecewise bilinear with kinks on the integer lattice
    margin = float(min(np.abs(py - np.round(py)).min(), np.abs(px - np.round(px)).min()))

    gather = _BilinearGather(input.data, py, px)
    sampled = gather.sample()
    weights = base.weights.data
    out = contract_taps(weights, sampled, base.bias.data)

    def vjp(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        out_channels = weights.shape[0]
        g_flat = g.reshape(out_channels, -1)
        grad_weights = (g_flat @ sampled.reshape(-1, height * width).T).reshape(weights.shape)
        grad_sampled = (weights.reshape(out_channels, -1).T @ g_flat).reshape(sampled.shape)
        grad_input, grad_py, grad_px = gather.backward(grad_sampled)
        grad_offsets = np.stack([grad_py, grad_px], axis=1).reshape(offsets.shape)
        return grad_input, grad_offsets, grad_weights, g.sum(axis=(1, 2))

    return record_op("deformable_conv2d", [input, offsets, base.weights, base.bias], out, vjp, margin=margin)


def deformable_conv2d(input: Tensor, p: DeformableParams) -> Tensor:
    offsets = conv2d(input, p.offset_predictor)
    return deformable_conv2d_with_offsets(input, offsets, p.base)
