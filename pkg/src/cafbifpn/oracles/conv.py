"""
Loop references for the convolution family.

Everything here indexes plain nested lists one scalar at a time. Keep it that way: these functions
check the vectorised kernels and must not share their code paths.
"""
import math

import numpy as np

from cafbifpn.conv import Conv2dParams, DeformableParams
from cafbifpn.errors import ShapeError
from cafbifpn.tensor import Tensor


def conv2d_reference(input: Tensor, params: Conv2dParams) -> Tensor:
    if input.rank != 3 or input.shape[0] != params.in_channels:
        raise ShapeError(f"conv2d_reference: input dims {input.dims} do not match {params.in_channels} channels")
    x = input.data.tolist()
    w = params.weights.data.tolist()
    b = params.bias.data.tolist()
    c_in, height, width = input.shape
    kh, kw = params.kernel_size
    ph, pw = params.padding
    s, d = params.stride, params.dilation
    out_h, out_w = params.output_extent(height, width)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"conv2d_reference: empty output {out_h}x{out_w}")

    out = [[[0.0] * out_w for _ in range(out_h)] for _ in range(params.out_channels)]
    for o in range(params.out_channels):
        for y in range(out_h):
            for xx in range(out_w):
                acc = b[o]
                for c in range(c_in):
                    for i in range(kh):
                        for j in range(kw):
                            iy = y * s + d * i - ph
                            ix = xx * s + d * j - pw
                            if 0 <= iy < height and 0 <= ix < width:
                                acc += w[o][c][i][j] * x[c][iy][ix]
                out[o][y][xx] = acc
    return Tensor(np.array(out), dtype=input.dtype)


def depthwise_conv2d_reference(input: Tensor, weights: Tensor) -> Tensor:
    x = input.data.tolist()
    w = weights.data.tolist()
    channels, height, width = input.shape
    k = weights.dims[1]
    pad = (k - 1) // 2
    out = [[[0.0] * width for _ in range(height)] for _ in range(channels)]
    for c in range(channels):
        for y in range(height):
            for xx in range(width):
                acc = 0.0
                for i in range(k):
                    for j in range(k):
                        iy, ix = y + i - pad, xx + j - pad
                        if 0 <= iy < height and 0 <= ix < width:
                            acc += w[c][i][j] * x[c][iy][ix]
                out[c][y][xx] = acc
    return Tensor(np.array(out), dtype=input.dtype)


def bilinear_reference(plane: list, y: float, x: float) -> float:
    """Bilinear read of a single [H][W] plane with zeros outside."""
    height, width = len(plane), len(plane[0])
    y0, x0 = math.floor(y), math.floor(x)
    ly, lx = y - y0, x - x0

    def at(iy: int, ix: int) -> float:
        return plane[iy][ix] if 0 <= iy < height and 0 <= ix < width else 0.0

    return (
        (1 - ly) * (1 - lx) * at(y0, x0)
        + (1 - ly) * lx * at(y0, x0 + 1)
        + ly * (1 - lx) * at(y0 + 1, x0)
        + ly * lx * at(y0 + 1, x0 + 1)
    )


def deformable_conv2d_reference(input: Tensor, params: DeformableParams) -> Tensor:
    """Offsets from the predictor, then a loop over taps reading bilinear samples at the shifted grid."""
    offsets = conv2d_reference(input, params.offset_predictor).data.tolist()
    base = params.base
    x = input.data.tolist()
    w = base.weights.data.tolist()
    b = base.bias.data.tolist()
    c_in, height, width = input.shape
    kh, kw = base.kernel_size
    ph, pw = base.padding
    d = base.dilation

    out = [[[0.0] * width for _ in range(height)] for _ in range(base.out_channels)]
    for o in range(base.out_channels):
        for y in range(height):
            for xx in range(width):
                acc = b[o]
                for i in range(kh):
                    for j in range(kw):
                        t = i * kw + j
                        sy = y + d * i - ph + offsets[2 * t][y][xx]
                        sx = xx + d * j - pw + offsets[2 * t + 1][y][xx]
                        for c in range(c_in):
                            acc += w[o][c][i][j] * bilinear_reference(x[c], sy, sx)
                out[o][y][xx] = acc
    return Tensor(np.array(out), dtype=input.dtype)
