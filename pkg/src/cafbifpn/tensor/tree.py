"""Traversal of parameter records (pydantic models, dicts, lists, tuples) holding Tensors."""
from typing import Any, Callable, Iterator

from pydantic import BaseModel

from cafbifpn.tensor.core import Tape, Tensor


def _join(prefix: str, key: Any) -> str:
    return f"{prefix}.{key}" if prefix else str(key)


def named_tensors(obj: Any, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield (dotted name, tensor) for every Tensor reachable from `obj`, in field order."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif isinstance(obj, BaseModel):
        for field in type(obj).model_fields:
            yield from named_tensors(getattr(obj, field), _join(prefix, field))
    elif isinstance(obj, dict):
        for key, value in obj.items():
            yield from named_tensors(value, _join(prefix, key))
    elif isinstance(obj, (list, tuple)):
        for index, value in enumerate(obj):
            yield from named_tensors(value, _join(prefix, index))


def map_tensors(obj: Any, fn: Callable[[str, Tensor], Tensor], prefix: str = "") -> Any:
    """Rebuild `obj` with every Tensor replaced by fn(name, tensor)."""
    if isinstance(obj, Tensor):
        return fn(prefix, obj)
    if isinstance(obj, BaseModel):
        update = {field: map_tensors(getattr(obj, field), fn, _join(prefix, field)) for field in type(obj).model_fields}
        return obj.model_copy(update=update)
    if isinstance(obj, dict):
        return {key: map_tensors(value, fn, _join(prefix, key)) for key, value in obj.items()}
    if isinstance(obj, list):
        return [map_tensors(value, fn, _join(prefix, index)) for index, value in enumerate(obj)]
    if isinstance(obj, tuple):
        return tuple(map_tensors(value, fn, _join(prefix, index)) for index, value in enumerate(obj))
    return obj


def watch_tensors(obj: Any, tape: Tape, prefix: str = "") -> Any:
    """Register every Tensor in `obj` as a named leaf of `tape`."""
    return map_tensors(obj, lambda name, tensor: tape.watch(tensor, name=name), prefix)
