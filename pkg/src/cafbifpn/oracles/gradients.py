import math
from typing import Callable, Iterable, Optional, Union

import numpy as np

from cafbifpn.errors import NumericError
from cafbifpn.tensor import Tensor

ScalarFn = Callable[[Tensor], Union[float, Tensor]]


def _evaluate(fn: ScalarFn, x: np.ndarray, dtype: str) -> float:
    value = fn(Tensor(x, dtype=dtype))
    value = value.item() if isinstance(value, Tensor) else float(value)
    if not math.isfinite(value):
        raise NumericError(f"finite_diff_grad: non-finite evaluation {value}")
    return value


def finite_diff_grad(
    scalar_fn: ScalarFn,
    input: Tensor,
    h: Optional[float] = None,
    indices: Optional[Iterable[tuple[int, ...]]] = None,
) -> Tensor:
    """
    Central differences (f(x + h e_i) - f(x - h e_i)) / 2h, with h = 1e-5 * max(1, |x_i|) unless given.

    When `indices` is given only those coordinates are differentiated; the rest of the result is zero.
    """
    base = input.numpy()
    grad = np.zeros_like(base)
    coordinates = np.ndindex(base.shape) if indices is None else indices
    for index in coordinates:
        index = tuple(index)
        step = h if h is not None else 1e-5 * max(1.0, abs(float(base[index])))
        x = base.copy()
        x[index] = base[index] + step
        upper = _evaluate(scalar_fn, x, input.dtype)
        x[index] = base[index] - step
        lower = _evaluate(scalar_fn, x, input.dtype)
        grad[index] = (upper - lower) / (2.0 * step)
    return Tensor(grad, dtype=input.dtype)
