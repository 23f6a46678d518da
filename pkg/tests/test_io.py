import json
import struct

import numpy as np
import pytest

from cafbifpn.errors import ConfigError, FormatError
from cafbifpn.io import (
    FIXTURE_DIMS,
    RunConfig,
    config_from_dict,
    config_parse,
    crop_to,
    gen_fixture,
    load_backbone,
    pad_to_multiple,
    tensor_from_bytes,
    tensor_read,
    tensor_to_bytes,
    tensor_write,
)
from cafbifpn.tensor import SplitMix64, Tape, Tensor, sum_all


def test_write_then_read_is_bit_identical(tmp_path) -> None:
    t = SplitMix64(0).uniform_tensor([3, 4, 5], -1, 1)
    tensor_write(tmp_path / "t.tnsr", t)
    back = tensor_read(tmp_path / "t.tnsr")
    assert back.dims == [3, 4, 5] and back.dtype == "float64"
    assert back.data.tobytes() == t.data.tobytes()


def test_random_round_trips() -> None:
    rng = SplitMix64(1)
    for _ in range(1000):
        rank = 1 + rng.next_raw() % 4
        dims = [1 + int(rng.next_raw() % 5) for _ in range(rank)]
        dtype = "float32" if rng.next_raw() % 2 else "float64"
        t = rng.uniform_tensor(dims, -1e6, 1e6, dtype)
        back = tensor_from_bytes(tensor_to_bytes(t))
        assert back.dims == t.dims and back.dtype == t.dtype
        assert back.data.tobytes() == t.data.tobytes()


def test_header_layout() -> None:
    blob = tensor_to_bytes(Tensor(np.array([1.5, -2.0], dtype=np.float32)))
    assert blob[:8] == b"TNSR\x01\x01\x01\x00"
    assert struct.unpack_from("<Q", blob, 8) == (2,)
    assert len(blob) == 8 + 8 + 2 * 4


def _blob() -> bytes:
    return tensor_to_bytes(Tensor([[1.0, 2.0], [3.0, 4.0]]))


def test_truncated_payload_names_both_byte_counts() -> None:
    with pytest.raises(FormatError, match="needs 32 bytes, found 31") as excinfo:
        tensor_from_bytes(_blob()[:-1])
    assert excinfo.value.offset == 24


@pytest.mark.parametrize(
    "offset,value,message",
    [(0, ord("X"), "bad magic"), (4, 2, "version"), (5, 7, "unknown dtype"), (7, 1, "reserved")],
)
def test_corrupted_header(offset: int, value: int, message: str) -> None:
    blob = bytearray(_blob())
    blob[offset] = value
    with pytest.raises(FormatError, match=message) as excinfo:
        tensor_from_bytes(bytes(blob))
    assert excinfo.value.offset == offset


@pytest.mark.parametrize("blob", [b"", b"TNS", b"TNSR\x01\x02\x02\x00" + b"\x00" * 8, _blob() + b"\x00"])
def test_malformed_files_raise_format_error(blob: bytes) -> None:
    with pytest.raises(FormatError):
        tensor_from_bytes(blob)


def test_config_defaults() -> None:
    config = config_parse("{}")
    assert config == RunConfig()
    assert (config.regions_s, config.topk_k, config.heads, config.fusion_width) == (2, 2, 1, 48)
    assert (config.epsilon, config.dilation, config.lce_kernel, config.activation) == (1e-4, 2, 5, "relu")
    assert config.cfe_enabled and config.attention_fusion_enabled
    assert config.topdown_source == "input" and config.seed == 0


@pytest.mark.parametrize(
    "values,message",
    [
        ({"fusion_width": 50}, "fusion_width % 3"),
        ({"topk_k": 5, "regions_s": 2}, "topk_k ≤ S²"),
        ({"heads": 4, "fusion_width": 48 + 6}, "heads divides fusion_width"),
        ({"lce_kernel": 4}, "lce_kernel must be odd"),
        ({"regions": 2}, "unknown key: regions"),
        ({"seed": -1}, "seed"),
        ({"topdown_source": "output"}, "cyclic"),
    ],
)
def test_config_errors(values: dict, message: str) -> None:
    with pytest.raises(ConfigError, match=message):
        config_parse(json.dumps(values))


@pytest.mark.parametrize("text", ["[1, 2]", '{"fusion_width": ', '{"seed": {"value": 1}}'])
def test_config_must_be_a_flat_object(text: str) -> None:
    with pytest.raises(ConfigError):
        config_parse(text)


def test_config_from_dict_keeps_values() -> None:
    config = config_from_dict({"regions_s": 4, "topk_k": 16, "seed": 2**64 - 1, "dtype": "float32"})
    assert config.topk_k == 16 and config.seed == 2**64 - 1 and config.dtype == "float32"


def test_pad_to_multiple() -> None:
    f = SplitMix64(2).uniform_tensor([2, 7, 7], -1, 1)
    padded = pad_to_multiple(f, 2)
    assert padded.dims == [2, 8, 8]
    assert np.all(padded.data[:, 7, :] == 0) and np.all(padded.data[:, :, 7] == 0)
    assert np.array_equal(crop_to(padded, 7, 7).data, f.data)
    even = Tensor.ones([1, 8, 8])
    assert pad_to_multiple(even, 2) is even


def test_pad_and_crop_gradients() -> None:
    tape = Tape()
    f = tape.watch(Tensor.ones([1, 3, 5]))
    grads = tape.backward(sum_all(crop_to(pad_to_multiple(f, 4), 3, 5)))
    assert np.array_equal(grads[f], np.ones((1, 3, 5)))


def test_gen_fixture_is_deterministic(tmp_path) -> None:
    first, second, other = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    gen_fixture(3, first)
    gen_fixture(3, second)
    gen_fixture(4, other)
    for level in FIXTURE_DIMS:
        name = f"C{level}.tnsr"
        assert (first / name).read_bytes() == (second / name).read_bytes()
        assert (first / name).read_bytes() != (other / name).read_bytes()
    assert (first / "manifest.json").read_bytes() == (second / "manifest.json").read_bytes()


def test_fixture_manifest_and_values(fixture_dir) -> None:
    manifest = json.loads((fixture_dir / "manifest.json").read_text())
    assert manifest["seed"] == 7 and manifest["dtype"] == "float64"
    assert [(entry["level"], entry["dims"]) for entry in manifest["tensors"]] == sorted(FIXTURE_DIMS.items())
    backbone = load_backbone(fixture_dir)
    for level, dims in FIXTURE_DIMS.items():
        assert backbone[level].dims == dims
        assert backbone[level].data.min() >= -1.0 and backbone[level].data.max() < 1.0


def test_load_backbone_rejects_a_broken_manifest(tmp_path) -> None:
    gen_fixture(1, tmp_path)
    (tmp_path / "manifest.json").write_text('{"seed": 1}')
    with pytest.raises(FormatError, match="manifest.json"):
        load_backbone(tmp_path)
