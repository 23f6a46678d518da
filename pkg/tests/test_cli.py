import json

import pytest

from cafbifpn.cli import COMMANDS, _load_config, main
from cafbifpn.commands import PROPERTIES, cmd_selfcheck
from cafbifpn.errors import ConfigError
from cafbifpn.io import tensor_read


def _write_config(path, **values) -> str:
    path.write_text(json.dumps(values))
    return str(path)


def test_command_table() -> None:
    assert sorted(COMMANDS) == ["bench", "forward", "gen-fixture", "gradcheck", "selfcheck"]


def test_selfcheck_passes(capsys) -> None:
    assert main(["selfcheck"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == len(PROPERTIES)
    assert all(line.startswith("PASS  ") for line in lines)


def test_injected_tiebreak_fault_names_the_routing_property(capsys) -> None:
    assert main(["selfcheck", "--inject-fault", "topk-tiebreak"]) == 1
    failed = [line for line in capsys.readouterr().out.splitlines() if line.startswith("FAIL")]
    assert len(failed) == 1
    assert "top-k routing" in failed[0]


def test_unknown_fault() -> None:
    with pytest.raises(ConfigError):
        cmd_selfcheck(inject_fault="nan-softmax")
    assert main(["selfcheck", "--inject-fault", "nan-softmax"]) == 2


def test_gen_fixture_then_forward(tmp_path, capsys) -> None:
    fixture, out = tmp_path / "fixture", tmp_path / "out"
    assert main(["gen-fixture", "--seed", "7", "--out", str(fixture)]) == 0
    manifest = json.loads(capsys.readouterr().out)
    assert manifest["seed"] == 7 and len(manifest["tensors"]) == 4

    assert main(["forward", "--input", str(fixture), "--output", str(out)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["ba_invocations"] == 2
    assert [entry["dims"] for entry in report["outputs"]] == [[48, 64, 64], [48, 32, 32], [48, 16, 16], [48, 8, 8]]
    assert sorted(report["macs"]) == ["P3F", "P4F"]
    assert tensor_read(out / "P2O.tnsr").dims == [48, 64, 64]
    assert json.loads((out / "report.json").read_text()) == report


def test_forward_is_byte_identical_across_runs(tmp_path, fixture_dir) -> None:
    config = _write_config(tmp_path / "config.json", fusion_width=12, seed=3)
    for name in ("a", "b"):
        assert main(["forward", "--config", config, "--input", str(fixture_dir), "--output", str(tmp_path / name)]) == 0
    for level in (2, 3, 4, 5):
        file = f"P{level}O.tnsr"
        assert (tmp_path / "a" / file).read_bytes() == (tmp_path / "b" / file).read_bytes()


def test_forward_without_attention_reports_no_ba(tmp_path, fixture_dir, capsys) -> None:
    config = _write_config(tmp_path / "config.json", fusion_width=6, attention_fusion_enabled=False)
    assert main(["forward", "--config", config, "--input", str(fixture_dir), "--output", str(tmp_path / "out")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["ba_invocations"] == 0 and report["macs"] == {}


def test_gradcheck_command(tmp_path, capsys) -> None:
    config = _write_config(tmp_path / "config.json", fusion_width=6, lce_kernel=3)
    assert main(["gradcheck", "--config", config, "--seed", "7", "--group", "fusion_weights"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["passed"] and [group["group"] for group in report["groups"]] == ["fusion_weights"]


def test_bench_command(tmp_path, capsys) -> None:
    config = _write_config(tmp_path / "config.json", fusion_width=6, lce_kernel=3)
    assert main(["bench", "--config", config, "--repeats", "1"]) == 0
    report = json.loads(capsys.readouterr().out)
    points = {(p["H"], p["S"], p["k"]): p for p in report["points"]}
    assert points[(16, 4, 2)]["qk_ratio"] == 0.125
    assert points[(16, 4, 16)]["qk_ratio"] == 1.0
    assert all(p["ratio_exact"] and p["counters_match"] for p in report["points"])


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["transmogrify"],
        ["forward", "--input", "somewhere"],
        ["gen-fixture", "--seed", "-1", "--out", "x"],
        ["gen-fixture", "--seed", str(2**64), "--out", "x"],
    ],
)
def test_usage_errors(argv: list[str]) -> None:
    assert main(argv) == 2


def test_bad_config_and_missing_input(tmp_path, fixture_dir) -> None:
    config = _write_config(tmp_path / "config.json", fusion_width=50)
    assert main(["forward", "--config", config, "--input", str(fixture_dir), "--output", str(tmp_path / "o")]) == 2
    assert main(["forward", "--input", str(tmp_path / "missing"), "--output", str(tmp_path / "o")]) == 2


def test_config_that_is_not_utf8_is_a_usage_error(tmp_path, fixture_dir) -> None:
    config = tmp_path / "latin1.json"
    config.write_bytes(b'{"fusion_width": \xff}')
    with pytest.raises(ConfigError, match="not UTF-8"):
        _load_config(str(config))
    assert main(["forward", "--config", str(config), "--input", str(fixture_dir), "--output", str(tmp_path / "o")]) == 2


def test_selfcheck_covers_every_invariant_family() -> None:
    names = " | ".join(PROPERTIES)
    for fragment in (
        "relabelling regions permutes routing rows",
        "within the range of the gathered values",
        "non-negative and sum to one",
        "reshape and permute round-trip",
        "gradients: depthwise_conv2d",
        "gradients: deformable_conv2d",
        "gradients: BA backward",
        "gradients: cfe_forward",
        "gradients: raw fusion weights",
        "zero offset predictor reduces branch 3",
        "keeps the input extent",
        "four ablation configurations",
        "direct equation substitution",
    ):
        assert fragment in names, fragment
