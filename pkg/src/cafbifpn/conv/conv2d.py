"""
Standard and depthwise convolution by tap extraction.

Each kernel tap (i, j) reads a strided window of the zero-padded input; stacking the windows gives a
[C, k_h, k_w, H_out, W_out] block that a single matrix product contracts with the weights.
"""
from typing import Optional

import numpy as np

from cafbifpn.conv.params import Conv2dParams
from cafbifpn.errors import ConfigError, ShapeError
from cafbifpn.tensor import Tensor, record_op


def _window(offset: int, stride: int, count: int) -> slice:
    return slice(offset, offset + stride * (count - 1) + 1, stride)


def extract_taps(
    padded: np.ndarray, kernel: tuple[int, int], stride: int, dilation: int, out_hw: tuple[int, int]
) -> np.ndarray:
    channels = padded.shape[0]
    (kh, kw), (out_h, out_w) = kernel, out_hw
    taps = np.empty((channels, kh, kw, out_h, out_w), dtype=padded.dtype)
    for i in range(kh):
        for j in range(kw):
            taps[:, i, j] = padded[:, _window(i * dilation, stride, out_h), _window(j * dilation, stride, out_w)]
    return taps


def scatter_taps(
    taps_grad: np.ndarray, padded_shape: tuple[int, ...], stride: int, dilation: int
) -> np.ndarray:
    """Adjoint of extract_taps: accumulate tap gradients back onto the padded input."""
    _, kh, kw, out_h, out_w = taps_grad.shape
    grad = np.zeros(padded_shape, dtype=taps_grad.dtype)
    for i in range(kh):
        for j in range(kw):
            grad[:, _window(i * dilation, stride, out_h), _window(j * dilation, stride, out_w)] += taps_grad[:, i, j]
    return grad


def contract_taps(weights: np.ndarray, taps: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """out[o] = bias[o] + sum_k weights[o, k] * taps[k] with the tap axes flattened row-major."""
    out_channels = weights.shape[0]
    spatial = taps.shape[-2:]
    flat = weights.reshape(out_channels, -1) @ taps.reshape(-1, spatial[0] * spatial[1])
    return flat.reshape((out_channels,) + spatial) + bias[:, None, None]


def _check_feature_map(input: Tensor, op: str) -> None:
    if input.rank != 3:
        raise ShapeError(f"{op}: expected a [C, H, W] feature map, got dims {input.dims}")


def conv2d(input: Tensor, p: Conv2dParams) -> Tensor:
    _check_feature_map(input, "conv2d")
    channels, height, width = input.shape
    if channels != p.in_channels:
        raise ShapeError(f"conv2d: input has {channels} channels, weights {p.weights.dims} expect {p.in_channels}")
    out_h, out_w = p.output_extent(height, width)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"conv2d: non-positive output extent {out_h}x{out_w} for input {input.dims}")

    ph, pw = p.padding
    padded = np.pad(input.data, ((0, 0), (ph, ph), (pw, pw)))
    taps = extract_taps(padded, p.kernel_size, p.stride, p.dilation, (out_h, out_w))
    weights = p.weights.data
    out = contract_taps(weights, taps, p.bias.data)

    def vjp(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        g_flat = g.reshape(g.shape[0], -1)
        taps_flat = taps.reshape(-1, out_h * out_w)
        grad_weights = (g_flat @ taps_flat.T).reshape(weights.shape)
        grad_taps = (weights.reshape(weights.shape[0], -1).T @ g_flat).reshape(taps.shape)
        grad_padded = scatter_taps(grad_taps, padded.shape, p.stride, p.dilation)
        grad_input = grad_padded[:, ph : ph + height, pw : pw + width]
        return grad_input, grad_weights, g.sum(axis=(1, 2))

    return record_op("conv2d", [input, p.weights, p.bias], out, vjp)


def depthwise_conv2d(input: Tensor, weights: Tensor, padding: Optional[int] = None) -> Tensor:
    """Per-channel k x k convolution (k odd) with extent-preserving zero padding."""
    _check_feature_map(input, "depthwise_conv2d")
    if weights.rank != 3 or weights.dims[1] != weights.dims[2]:
        raise ShapeError(f"depthwise_conv2d: weights must be [C, k, k], got {weights.dims}")
    kernel = weights.dims[1]
    if kernel % 2 == 0:
        raise ConfigError(f"depthwise_conv2d: kernel size {kernel} must be odd")
    if padding is not None and padding != (kernel - 1) // 2:
        raise ConfigError(f"depthwise_conv2d: padding {padding} must be (k-1)/2 = {(kernel - 1) // 2}")
    channels, height, width = input.shape
    if weights.dims[0] != channels:
        raise ShapeError(f"depthwise_conv2d: weights {weights.dims} do not match {channels} input channels")

    pad = (kernel - 1) // 2
    padded = np.pad(input.data, ((0, 0), (pad, pad), (pad, pad)))
    taps = extract_taps(padded, (kernel, kernel), 1, 1, (height, width))
    w = weights.data
    out = np.einsum("cij,cijyx->cyx", w, taps)

    def vjp(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        grad_taps = np.einsum("cij,cyx->cijyx", w, g)
        grad_input = scatter_taps(grad_taps, padded.shape, 1, 1)[:, pad : pad + height, pad : pad + width]
        return grad_input, np.einsum("cyx,cijyx->cij", g, taps)

    return record_op("depthwise_conv2d", [input, weights], out, vjp)
