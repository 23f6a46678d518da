from typing import Optional

import numpy as np
import pytest

from cafbifpn.commands import run_forward
from cafbifpn.conv import conv_params
from cafbifpn.errors import PipelineError, ShapeError
from cafbifpn.io import RunConfig, config_from_dict, fixture_tensors
from cafbifpn.oracles import c_afbifpn_reference, plain_bifpn_reference
from cafbifpn.pyramid import (
    LEVELS,
    FusionWeights,
    PipelineTrace,
    afbifpn_forward,
    c_afbifpn_forward,
    fuse,
    init_pipeline_params,
    resize,
)
from cafbifpn.tensor import SplitMix64, Tensor
from tests.conftest import desk_pyramid

FUSION_NODES = ("p4f", "p3f", "p2o", "p3o", "p4o", "p5o")


def _plain_params(config: RunConfig, channels: int = 6, weights: Optional[dict[str, Tensor]] = None):
    config = config.model_copy(update={"attention_fusion_enabled": False, "epsilon": 0.0})
    params = init_pipeline_params(config, {level: channels for level in LEVELS})
    if weights is not None:
        params = params.model_copy(update={"fusion": FusionWeights(epsilon=0.0, **weights)})
    return params


def test_resize_examples() -> None:
    assert resize(Tensor([[[2.5]]]), "up2").data.tolist() == [[[2.5, 2.5], [2.5, 2.5]]]
    assert resize(Tensor([[[1.0, 3.0], [5.0, 7.0]]]), "down2").data.tolist() == [[[4.0]]]
    f = SplitMix64(0).uniform_tensor([3, 5, 4], -1, 1)
    assert np.array_equal(resize(resize(f, "up2"), "down2").data, f.data)
    with pytest.raises(ShapeError):
        resize(Tensor.ones([1, 3, 4]), "down2")


def test_fuse_examples() -> None:
    x, y = Tensor([1.0, 2.0]), Tensor([3.0, 6.0])
    assert fuse([x, y], Tensor([1.0, 1.0]), 0.0).data.tolist() == [2.0, 4.0]
    assert np.allclose(fuse([x], Tensor([1.0]), 1e-4).data, x.data * (1 / (1 + 1e-4)), rtol=0, atol=1e-15)
    z = Tensor([-1.0, 5.0])
    clamped = fuse([x, y, z], Tensor([2.0, -5.0, 3.0])).data
    assert np.array_equal(clamped, fuse([x, y, z], Tensor([2.0, 0.0, 3.0])).data)
    with pytest.raises(ShapeError):
        fuse([x, Tensor([1.0, 2.0, 3.0])], Tensor([1.0, 1.0]))


def test_fuse_is_bounded_by_its_inputs() -> None:
    rng = SplitMix64(1)
    for _ in range(20):
        inputs = [rng.uniform_tensor([2, 4, 4], -3, 3) for _ in range(3)]
        out = fuse(inputs, rng.uniform_tensor([3], -0.5, 2.0)).data
        assert np.abs(out).max() <= max(np.abs(t.data).max() for t in inputs)


def test_fuse_approaches_the_weighted_mean_as_epsilon_shrinks() -> None:
    rng = SplitMix64(2)
    inputs = [rng.uniform_tensor([2, 3, 3], -1, 1) for _ in range(2)]
    weights = Tensor([0.7, 1.3])
    mean = fuse(inputs, weights, 0.0).data
    gaps = [np.abs(fuse(inputs, weights, eps).data - mean).max() for eps in (1e-1, 1e-2, 1e-4)]
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 1e-4


def test_fusion_weight_names() -> None:
    named = FusionWeights.constant(1.0).named()
    assert list(named) == [
        *("w21", "w22"),
        *("w31", "w32", "w33", "w34", "w35"),
        *("w41", "w42", "w43", "w44", "w45"),
        *("w51", "w52"),
    ]


def test_plain_bifpn_reduction(desk_config, desk_inputs) -> None:
    rng = SplitMix64(3)
    weights = {node: rng.uniform_tensor([3 if node in ("p3o", "p4o") else 2], 0.2, 2.0) for node in FUSION_NODES}
    params = _plain_params(desk_config, weights=weights)
    outputs = afbifpn_forward(desk_inputs, params).outputs
    expected = plain_bifpn_reference(desk_inputs, {node: w.data.tolist() for node, w in weights.items()}, 0.0)
    for level in LEVELS:
        assert np.array_equal(outputs[level].data, expected[level].data)


def test_constant_maps_propagate(desk_config) -> None:
    inputs = {level: Tensor.full(f.dims, 0.75) for level, f in desk_pyramid(0).items()}
    outputs = afbifpn_forward(inputs, _plain_params(desk_config)).outputs
    for level in LEVELS:
        assert np.all(outputs[level].data == 0.75)


def test_rescaling_node_weights_is_exact(desk_config, desk_inputs) -> None:
    rng = SplitMix64(4)
    weights = {node: rng.uniform_tensor([3 if node in ("p3o", "p4o") else 2], 0.2, 2.0) for node in FUSION_NODES}
    scaled = {node: Tensor(w.data * 4.0) for node, w in weights.items()}
    base = afbifpn_forward(desk_inputs, _plain_params(desk_config, weights=weights)).outputs
    rescaled = afbifpn_forward(desk_inputs, _plain_params(desk_config, weights=scaled)).outputs
    for level in LEVELS:
        assert np.array_equal(base[level].data, rescaled[level].data)


def test_attention_runs_exactly_twice(desk_params, desk_inputs) -> None:
    trace = PipelineTrace()
    levels = afbifpn_forward(desk_inputs, desk_params, trace)
    assert trace.ba_invocations == 2
    assert sorted(trace.routing) == [3, 4]
    assert sorted(levels.intermediate) == [3, 4]
    assert levels.get(4, "F").dims == [6, 4, 4]
    with pytest.raises(PipelineError, match="P2F"):
        levels.get(2, "F")


def test_frozen_routing_reproduces_the_pass(desk_params, desk_inputs) -> None:
    trace = PipelineTrace()
    first = afbifpn_forward(desk_inputs, desk_params, trace).outputs
    second = afbifpn_forward(desk_inputs, desk_params, frozen_routing=trace.routing).outputs
    for level in LEVELS:
        assert np.array_equal(first[level].data, second[level].data)


def test_matches_equation_substitution(desk_params, desk_backbone) -> None:
    outputs = c_afbifpn_forward(desk_backbone, desk_params).outputs
    expected = c_afbifpn_reference(desk_backbone, desk_params)
    for level in LEVELS:
        assert np.abs(outputs[level].data - expected[level].data).max() <= 1e-10


def test_double_ablation_is_plain_bifpn_over_projections(desk_config) -> None:
    config = desk_config.model_copy(update={"cfe_enabled": False})
    params = _plain_params(config)
    identity = conv_params(Tensor(np.eye(6).reshape(6, 6, 1, 1)), Tensor.zeros([6]))
    params = params.model_copy(update={"projection": {level: identity for level in LEVELS}})
    backbone = desk_pyramid(6)
    outputs = c_afbifpn_forward(backbone, params).outputs
    expected = plain_bifpn_reference(backbone)
    for level in LEVELS:
        assert np.array_equal(outputs[level].data, expected[level].data)


@pytest.mark.parametrize("cfe_enabled", [True, False])
@pytest.mark.parametrize("attention", [True, False])
def test_ablation_configurations(desk_config, desk_backbone, cfe_enabled: bool, attention: bool) -> None:
    config = desk_config.model_copy(update={"cfe_enabled": cfe_enabled, "attention_fusion_enabled": attention})
    params = init_pipeline_params(config, {level: 4 for level in LEVELS})
    trace = PipelineTrace()
    outputs = c_afbifpn_forward(desk_backbone, params, trace).outputs
    assert [outputs[level].dims for level in LEVELS] == [[6, 16, 16], [6, 8, 8], [6, 4, 4], [6, 2, 2]]
    assert trace.ba_invocations == (2 if attention else 0)


def test_shape_contract_and_determinism() -> None:
    config = RunConfig(fusion_width=48, regions_s=2, topk_k=2, seed=1)
    backbone = fixture_tensors(9)
    channels = {level: f.dims[0] for level, f in backbone.items()}
    first = c_afbifpn_forward(backbone, init_pipeline_params(config, channels)).outputs
    assert [first[level].dims for level in LEVELS] == [[48, 64, 64], [48, 32, 32], [48, 16, 16], [48, 8, 8]]
    again = c_afbifpn_forward(backbone, init_pipeline_params(config, channels))
    for level in LEVELS:
        assert first[level].data.tobytes() == again.outputs[level].data.tobytes()


def test_float32_pass_runs_end_to_end() -> None:
    levels, trace = run_forward(config_from_dict({"dtype": "float32"}), fixture_tensors(1))
    assert trace.ba_invocations == 2
    assert [levels.outputs[level].dims for level in LEVELS] == [[48, 64, 64], [48, 32, 32], [48, 16, 16], [48, 8, 8]]
    for level in LEVELS:
        assert levels.outputs[level].dtype == "float32", f"P{level}O"
        assert np.all(np.isfinite(levels.outputs[level].data))


def test_errors_name_the_failing_node(desk_params, desk_inputs) -> None:
    broken = dict(desk_inputs)
    broken[3] = Tensor.ones([6, 7, 8])
    with pytest.raises(PipelineError, match="P3I"):
        afbifpn_forward(broken, desk_params)

    missing = {level: f for level, f in desk_inputs.items() if level != 5}
    with pytest.raises(PipelineError, match="P5I"):
        afbifpn_forward(missing, desk_params)

    fusion = desk_params.fusion.model_copy(update={"p3o": Tensor.ones([2])})
    with pytest.raises(PipelineError, match="P3O") as excinfo:
        afbifpn_forward(desk_inputs, desk_params.model_copy(update={"fusion": fusion}))
    assert excinfo.value.node == "P3O"


def test_output_sourced_top_down_is_rejected(desk_params, desk_inputs) -> None:
    with pytest.raises(PipelineError, match="cyclic"):
        afbifpn_forward(desk_inputs, desk_params.model_copy(update={"topdown_source": "output"}))


def test_backbone_extents_must_halve(desk_params, desk_backbone) -> None:
    backbone = dict(desk_backbone)
    backbone[4] = Tensor.ones([4, 3, 3])
    with pytest.raises(PipelineError, match="C4"):
        c_afbifpn_forward(backbone, desk_params)
