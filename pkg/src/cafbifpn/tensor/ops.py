from typing import Callable, Literal, Sequence

import einops
import numpy as np

from cafbifpn.errors import ConfigError, NumericError, ShapeError
from cafbifpn.tensor.core import Tensor, record_op

ElementwiseOp = Literal["add", "sub", "mul"]


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.dims != b.dims:
        raise ShapeError(f"{op}: dims {a.dims} and {b.dims} differ")
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: dtypes {a.dtype} and {b.dtype} differ")


def elementwise(op: ElementwiseOp, a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, op)
    x, y = a.data, b.data
    if op == "add":
        return record_op("add", [a, b], x + y, lambda g: (g, g))
    if op == "sub":
        return record_op("sub", [a, b], x - y, lambda g: (g, -g))
    if op == "mul":
        return record_op("mul", [a, b], x * y, lambda g: (g * y, g * x))
    raise ConfigError(f"unknown elementwise op: {op}")


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("mul", a, b)


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Sum of equally shaped tensors."""
    result = tensors[0]
    for tensor in tensors[1:]:
        result = add(result, tensor)
    return result


def scale(t: Tensor, factor: float) -> Tensor:
    return record_op("scale", [t], t.data * factor, lambda g: (g * factor,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.rank != 2 or b.rank != 2:
        raise ShapeError(f"matmul: expected rank-2 operands, got dims {a.dims} and {b.dims}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ in {a.dims} x {b.dims}")
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul: dtypes {a.dtype} and {b.dtype} differ")
    x, y = a.data, b.data
    return record_op("matmul", [a, b], x @ y, lambda g: (g @ y.T, x.T @ g))


def softmax_lastdim(t: Tensor) -> Tensor:
    x = t.data
    if not np.all(np.isfinite(x)):
        raise NumericError(f"softmax: non-finite input in tensor of dims {t.dims}")
    shifted = np.exp(x - x.max(axis=-1, keepdims=True))
    y = shifted / shifted.sum(axis=-1, keepdims=True)

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record_op("softmax", [t], y, vjp)


def relu(t: Tensor) -> Tensor:
    x = t.data
    active = x > 0
    margin = float(np.abs(x).min())
    return record_op("relu", [t], np.where(active, x, 0).astype(x.dtype), lambda g: (g * active,), margin=margin)


def reshape(t: Tensor, dims: Sequence[int]) -> Tensor:
    dims = tuple(int(d) for d in dims)
    if int(np.prod(dims)) != t.size:
        raise ShapeError(f"reshape: cannot reshape {t.dims} ({t.size} elements) into {list(dims)}")
    source = t.shape
    return record_op("reshape", [t], t.data.reshape(dims), lambda g: (g.reshape(source),))


def permute(t: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(t.rank)):
        raise ShapeError(f"permute: {list(axes)} is not a permutation of the axes of {t.dims}")
    inverse = tuple(int(a) for a in np.argsort(axes))
    return record_op("permute", [t], np.transpose(t.data, axes), lambda g: (np.transpose(g, inverse),))


def transpose(t: Tensor) -> Tensor:
    return permute(t, (1, 0))


def concat_axis(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat: no inputs")
    rank = tensors[0].rank
    if not 0 <= axis < rank:
        raise ShapeError(f"concat: axis {axis} out of range for rank {rank}")
    for tensor in tensors[1:]:
        if tensor.rank != rank or any(
            tensor.shape[i] != tensors[0].shape[i] for i in range(rank) if i != axis
        ):
            raise ShapeError(f"concat: dims {tensors[0].dims} and {tensor.dims} disagree off axis {axis}")
        if tensor.dtype != tensors[0].dtype:
            raise ShapeError(f"concat: dtypes {tensors[0].dtype} and {tensor.dtype} differ")
    boundaries = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g: np.ndarray) -> list[np.ndarray]:
        return np.split(g, boundaries, axis=axis)

    return record_op("concat", list(tensors), np.concatenate([t.data for t in tensors], axis=axis), vjp)


def slice_axis(t: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if not 0 <= axis < t.rank:
        raise ShapeError(f"slice: axis {axis} out of range for rank {t.rank}")
    if not 0 <= start < stop <= t.shape[axis]:
        raise ShapeError(f"slice: [{start}, {stop}) out of range for extent {t.shape[axis]}")
    index = tuple(slice(start, stop) if i == axis else slice(None) for i in range(t.rank))

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros(t.shape, dtype=g.dtype)
        grad[index] = g
        return (grad,)

    return record_op("slice", [t], t.data[index], vjp)


def rearrange(t: Tensor, pattern: str, **axes_lengths: int) -> Tensor:
    """einops rearrangement. `axes_lengths` must determine every axis of both sides of `pattern`."""
    left, right = pattern.split("->")
    inverse = f"{right.strip()} -> {left.strip()}"
    try:
        value = einops.rearrange(t.data, pattern, **axes_lengths)
    except einops.EinopsError as e:
        raise ShapeError(f"rearrange '{pattern}' on dims {t.dims}: {e}") from e
    return record_op("rearrange", [t], value, lambda g: (einops.rearrange(g, inverse, **axes_lengths),))


STRUCTURAL_OPS: dict[str, Callable[..., Tensor]] = {
    "reshape": reshape,
    "permute": permute,
    "concat_axis": concat_axis,
    "slice": slice_axis,
}


def structural(op: str, *args, **kwargs) -> Tensor:
    if op not in STRUCTURAL_OPS:
        raise ConfigError(f"unknown structural op: {op}")
    return STRUCTURAL_OPS[op](*args, **kwargs)


def reduce_mean_axis(t: Tensor, axis: int) -> Tensor:
    """Mean along `axis`. A rank-1 input keeps dims [1] so the result is still a Tensor."""
    if not -t.rank <= axis < t.rank:
        raise ShapeError(f"reduce_mean: axis {axis} out of range for dims {t.dims}")
    axis = axis % t.rank
    extent = t.shape[axis]
    value = t.data.mean(axis=axis, keepdims=t.rank == 1)

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        expanded = g if t.rank == 1 else np.expand_dims(g, axis)
        return (np.broadcast_to(expanded / extent, t.shape).copy(),)

    return record_op("reduce_mean", [t], value, vjp)


def sum_all(t: Tensor) -> Tensor:
    """Sum of every element as a Tensor of dims [1]."""
    return record_op("sum", [t], np.array([t.data.sum()], dtype=t.data.dtype), lambda g: (np.full(t.shape, g[0]),))
