"""
TensorFile codec.

Layout: magic "TNSR", version u8 = 1, dtype u8 (1 = float32, 2 = float64), rank u8, reserved u8 = 0,
rank little-endian u64 dims, then the row-major little-endian payload.
"""
import os
import struct
from typing import Union

import numpy as np

from cafbifpn.errors import FormatError
from cafbifpn.tensor import Tensor

MAGIC = b"TNSR"
VERSION = 1
DTYPE_CODES = {"float32": 1, "float64": 2}
CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
HEADER = struct.Struct("<4sBBBB")

PathType = Union[str, os.PathLike]


def tensor_to_bytes(t: Tensor) -> bytes:
    header = HEADER.pack(MAGIC, VERSION, DTYPE_CODES[t.dtype], t.rank, 0)
    dims = struct.pack(f"<{t.rank}Q", *t.dims)
    payload = np.ascontiguousarray(t.data, dtype=CODE_DTYPES[DTYPE_CODES[t.dtype]]).tobytes()
    return header + dims + payload


def tensor_from_bytes(blob: bytes) -> Tensor:
    if len(blob) < HEADER.size:
        raise FormatError(f"header needs {HEADER.size} bytes, file has {len(blob)}", offset=len(blob))
    magic, version, code, rank, reserved = HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if code not in CODE_DTYPES:
        raise FormatError(f"unknown dtype {code}", offset=5)
    if rank == 0:
        raise FormatError("rank must be at least 1", offset=6)
    if reserved != 0:
        raise FormatError(f"reserved byte must be 0, got {reserved}", offset=7)

    dims_end = HEADER.size + 8 * rank
    if len(blob) < dims_end:
        raise FormatError(f"dims need {dims_end} bytes, file has {len(blob)}", offset=len(blob))
    dims = list(struct.unpack_from(f"<{rank}Q", blob, HEADER.size))
    if any(extent == 0 for extent in dims):
        raise FormatError(f"every extent must be >= 1, got {dims}", offset=HEADER.size)

    dtype = CODE_DTYPES[code]
    expected = int(np.prod(dims, dtype=object)) * dtype.itemsize
    actual = len(blob) - dims_end
    if actual != expected:
        raise FormatError(f"payload of dims {dims} needs {expected} bytes, found {actual}", offset=dims_end)
    data = np.frombuffer(blob, dtype=dtype, offset=dims_end).reshape(dims)
    return Tensor(data.astype(dtype.newbyteorder("="), copy=True))


def tensor_write(path: PathType, t: Tensor) -> None:
    with open(path, "wb") as f:
        f.write(tensor_to_bytes(t))


def tensor_read(path: PathType) -> Tensor:
    with open(path, "rb") as f:
        return tensor_from_bytes(f.read())
