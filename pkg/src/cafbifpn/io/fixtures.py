"""Synthetic backbone maps C2..C5 drawn from a SplitMix64 stream."""
import logging
import os
from pathlib import Path
from typing import Union

from pydantic import BaseModel, ValidationError

from cafbifpn.errors import FormatError
from cafbifpn.io.tensorfile import tensor_read, tensor_write
from cafbifpn.tensor import SplitMix64, Tensor

FIXTURE_DIMS = {2: [16, 64, 64], 3: [32, 32, 32], 4: [64, 16, 16], 5: [128, 8, 8]}
MANIFEST_NAME = "manifest.json"


class FixtureEntry(BaseModel):
    level: int
    file: str
    dims: list[int]


class FixtureManifest(BaseModel):
    seed: int
    dtype: str = "float64"
    tensors: list[FixtureEntry]


def fixture_tensors(seed: int, dims: dict[int, list[int]] = FIXTURE_DIMS) -> dict[int, Tensor]:
    """Backbone maps with values 2u - 1, drawn level by level from a single stream."""
    rng = SplitMix64(seed)
    return {level: rng.uniform_tensor(shape, -1.0, 1.0) for level, shape in sorted(dims.items())}


def gen_fixture(seed: int, out_dir: Union[str, os.PathLike]) -> FixtureManifest:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for level, tensor in fixture_tensors(seed).items():
        name = f"C{level}.tnsr"
        tensor_write(out / name, tensor)
        entries.append(FixtureEntry(level=level, file=name, dims=tensor.dims))
    manifest = FixtureManifest(seed=seed, tensors=entries)
    (out / MANIFEST_NAME).write_text(manifest.model_dump_json(indent=2) + "\n")
    logging.info(f"Wrote fixture for seed {seed} to {out}")
    return manifest


def load_backbone(in_dir: Union[str, os.PathLike]) -> dict[int, Tensor]:
    """Read the maps listed in a fixture manifest, checking their dims against it."""
    root = Path(in_dir)
    try:
        manifest = FixtureManifest.model_validate_json((root / MANIFEST_NAME).read_text())
    except ValidationError as e:
        raise FormatError(f"{MANIFEST_NAME}: {e}") from e
    backbone = {}
    for entry in manifest.tensors:
        tensor = tensor_read(root / entry.file)
        if tensor.dims != entry.dims:
            raise FormatError(f"{entry.file}: dims {tensor.dims} differ from manifest dims {entry.dims}")
        backbone[entry.level] = tensor
    return backbone
