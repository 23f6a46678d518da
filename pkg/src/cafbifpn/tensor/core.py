"""
Dense tensors over numpy arrays and a reverse-mode tape.

A Tensor is an immutable value. It is optionally attached to a Tape, in which case every operation
that consumes it records a node holding the parent references and a vector-Jacobian product closure.
"""
from dataclasses import dataclass
from typing import Any, Callable, Literal, Optional, Sequence, Union

import numpy as np

from cafbifpn.errors import GraphError, ShapeError

DTypeName = Literal["float32", "float64"]
DTYPES: dict[str, type] = {"float32": np.float32, "float64": np.float64}

VjpType = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Immutable row-major float32/float64 array with non-empty, positive dims."""

    __slots__ = ("_data", "_tape", "_node")

    def __init__(self, data: Any, dtype: Optional[DTypeName] = None) -> None:
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None and dtype not in DTYPES:
            raise ShapeError(f"unknown dtype: {dtype}")
        array = np.array(data, dtype=DTYPES[dtype] if dtype else None, copy=True)
        if array.dtype not in (np.float32, np.float64):
            array = array.astype(np.float64)
        self._data = _freeze(array)
        self._tape: Optional["Tape"] = None
        self._node: Optional[int] = None

    @classmethod
    def wrap(cls, array: np.ndarray, tape: Optional["Tape"] = None, node: Optional[int] = None) -> "Tensor":
        """Wrap an array without copying it. The array must not be mutated afterwards."""
        tensor = cls.__new__(cls)
        tensor._data = _freeze(array)
        tensor._tape = tape
        tensor._node = node
        return tensor

    @classmethod
    def zeros(cls, dims: Sequence[int], dtype: DTypeName = "float64") -> "Tensor":
        return cls.wrap(np.zeros(tuple(dims), dtype=DTYPES[dtype]))

    @classmethod
    def ones(cls, dims: Sequence[int], dtype: DTypeName = "float64") -> "Tensor":
        return cls.wrap(np.ones(tuple(dims), dtype=DTYPES[dtype]))

    @classmethod
    def full(cls, dims: Sequence[int], value: float, dtype: DTypeName = "float64") -> "Tensor":
        return cls.wrap(np.full(tuple(dims), value, dtype=DTYPES[dtype]))

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def dims(self) -> list[int]:
        return list(self._data.shape)

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def rank(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return int(self._data.size)

    @property
    def dtype(self) -> DTypeName:
        return "float32" if self._data.dtype == np.float32 else "float64"

    @property
    def tape(self) -> Optional["Tape"]:
        return self._tape

    @property
    def node(self) -> Optional[int]:
        return self._node

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, got dims {self.dims}")
        return float(self._data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor.wrap(self._data)

    def astype(self, dtype: DTypeName) -> "Tensor":
        return Tensor(self._data, dtype=dtype)

    def __add__(self, other: "Tensor") -> "Tensor":
        from cafbifpn.tensor.ops import add

        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        from cafbifpn.tensor.ops import sub

        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        from cafbifpn.tensor.ops import mul

        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from cafbifpn.tensor.ops import matmul

        return matmul(self, other)

    def __repr__(self) -> str:
        tracked = f", node={self._node}" if self._tape is not None else ""
        return f"Tensor(dims={self.dims}, dtype={self.dtype}{tracked})"


def _freeze(array: np.ndarray) -> np.ndarray:
    if array.ndim == 0:
        raise ShapeError("tensor dims must be non-empty")
    if any(extent < 1 for extent in array.shape):
        raise ShapeError(f"every extent must be >= 1, got {list(array.shape)}")
    array.flags.writeable = False
    return array


@dataclass
class Node:
    index: int
    kind: str
    parents: tuple[Optional[int], ...]
    shape: tuple[int, ...]
    vjp: Optional[VjpType] = None
    name: Optional[str] = None
    # distance of the recorded input to the nearest point where the op is not differentiable
    margin: Optional[float] = None


class GradientMap:
    """Gradients keyed by node index, looked up with the tensors that own the nodes."""

    def __init__(self, grads: dict[int, np.ndarray], tape: "Tape") -> None:
        self._grads = grads
        self._tape = tape

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        if tensor.tape is not self._tape or tensor.node is None:
            raise GraphError(f"{tensor!r} is not recorded on this tape")
        grad = self._grads.get(tensor.node)
        if grad is None:
            return np.zeros(tensor.shape, dtype=tensor.data.dtype)
        return grad

    def __contains__(self, tensor: Tensor) -> bool:
        return tensor.tape is self._tape and tensor.node in self._grads

    def leaves(self) -> dict[str, np.ndarray]:
        """Gradients of every named leaf, zero-filled for leaves the output does not depend on."""
        result = {}
        for node in self._tape.nodes:
            if node.kind == "leaf" and node.name is not None:
                grad = self._grads.get(node.index)
                result[node.name] = grad if grad is not None else np.zeros(node.shape)
        return result


class Tape:
    """Append-only record of operations. Single writer: recording and backward must not interleave."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def watch(self, tensor: Tensor, name: Optional[str] = None) -> Tensor:
        """Register a leaf and return the tracked tensor sharing its data."""
        node = Node(index=len(self.nodes), kind="leaf", parents=(), shape=tensor.shape, name=name)
        self.nodes.append(node)
        return Tensor.wrap(tensor.data, tape=self, node=node.index)

    def record(
        self,
        kind: str,
        parents: Sequence[Tensor],
        value: np.ndarray,
        vjp: VjpType,
        margin: Optional[float] = None,
    ) -> Tensor:
        parent_ids = []
        for parent in parents:
            if parent.tape is None:
                parent_ids.append(None)
            elif parent.tape is self:
                parent_ids.append(parent.node)
            else:
                raise GraphError(f"{kind}: operand {parent!r} belongs to another tape")
        node = Node(
            index=len(self.nodes),
            kind=kind,
            parents=tuple(parent_ids),
            shape=value.shape,
            vjp=vjp,
            margin=margin,
        )
        self.nodes.append(node)
        return Tensor.wrap(value, tape=self, node=node.index)

    def annotate(self, kind: str, margin: float) -> None:
        """Record a non-differentiable decision (e.g. a routing choice) and its margin."""
        self.nodes.append(Node(index=len(self.nodes), kind=kind, parents=(), shape=(), margin=margin))

    def margins(self) -> dict[str, float]:
        """Smallest recorded margin per node kind."""
        result: dict[str, float] = {}
        for node in self.nodes:
            if node.margin is not None:
                result[node.kind] = min(result.get(node.kind, np.inf), node.margin)
        return result

    def backward(self, output: Tensor, seed_gradient: Optional[Union[Tensor, np.ndarray]] = None) -> GradientMap:
        if output.tape is not self or output.node is None:
            raise GraphError(f"{output!r} is detached from this tape")
        if seed_gradient is None:
            seed = np.ones(output.shape, dtype=output.data.dtype)
        else:
            seed = np.asarray(seed_gradient.data if isinstance(seed_gradient, Tensor) else seed_gradient)
            if seed.shape != output.shape:
                raise ShapeError(f"seed gradient dims {list(seed.shape)} differ from output dims {output.dims}")

        grads: dict[int, np.ndarray] = {output.node: seed}
        # creation order is a topological order, so a reverse sweep visits each node once
        for node in reversed(self.nodes[: output.node + 1]):
            grad = grads.get(node.index)
            if grad is None or node.vjp is None:
                continue
            for parent, parent_grad in zip(node.parents, node.vjp(grad)):
                if parent is None or parent_grad is None:
                    continue
                if parent in grads:
                    grads[parent] = grads[parent] + parent_grad
                else:
                    grads[parent] = parent_grad
        return GradientMap(grads, self)


def record_op(
    kind: str,
    inputs: Sequence[Tensor],
    value: np.ndarray,
    vjp: VjpType,
    margin: Optional[float] = None,
) -> Tensor:
    """Wrap `value` as the result of `kind`, recording it when any input is tracked."""
    tapes = {id(t.tape): t.tape for t in inputs if t.tape is not None}
    if not tapes:
        return Tensor.wrap(value)
    if len(tapes) > 1:
        raise GraphError(f"{kind}: operands are recorded on different tapes")
    tape = next(iter(tapes.values()))
    return tape.record(kind, inputs, value, vjp, margin=margin)


def backward(
    tape: Tape, output: Tensor, seed_gradient: Optional[Union[Tensor, np.ndarray]] = None
) -> GradientMap:
    """Gradient of sum(seed * output) with respect to every node recorded before `output`."""
    return tape.backward(output, seed_gradient)
