import numpy as np
import pytest

from cafbifpn.attention import ba_forward, ba_forward_traced, bra_params
from cafbifpn.cfe import cfe_forward
from cafbifpn.commands import check_coordinate, check_group, cmd_gradcheck
from cafbifpn.commands.gradcheck import SAMPLES_PER_GROUP, THRESHOLD, relative_error, roundoff_floor
from cafbifpn.conv import conv_params, deformable_conv2d_with_offsets
from cafbifpn.errors import ConfigError
from cafbifpn.io import RunConfig
from cafbifpn.oracles import finite_diff_grad
from cafbifpn.pyramid import ParamInitializer, fuse
from cafbifpn.tensor import SplitMix64, Tape, Tensor, relu, sum_all

GRAD_CONFIG = RunConfig(fusion_width=6, regions_s=2, topk_k=2, lce_kernel=3)


def _max_relative(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float(np.max(np.abs(analytic - numeric) / scale))


def test_fusion_weight_gradient_is_the_quotient_rule() -> None:
    rng = SplitMix64(0)
    x, y = rng.uniform_tensor([2, 3, 3], -1, 1), rng.uniform_tensor([2, 3, 3], -1, 1)
    w = np.array([0.8, 1.7])
    eps = 1e-4
    tape = Tape()
    weights = tape.watch(Tensor(w))
    grads = tape.backward(sum_all(fuse([x, y], weights, eps)))[weights]

    denominator = w.sum() + eps
    numerator = w[0] * x.data.sum() + w[1] * y.data.sum()
    expected = [s / denominator - numerator / denominator**2 for s in (x.data.sum(), y.data.sum())]
    assert np.allclose(grads, expected, rtol=1e-12, atol=1e-14)


def test_clamped_fusion_weight_has_no_gradient() -> None:
    tape = Tape()
    weights = tape.watch(Tensor([1.0, -0.5]))
    grads = tape.backward(sum_all(fuse([Tensor.ones([1, 2, 2]), Tensor.full([1, 2, 2], 3.0)], weights)))[weights]
    assert grads[1] == 0.0
    assert tape.margins()["fuse"] == 0.5


def test_small_gradients_are_compared_relatively() -> None:
    assert relative_error(1.0e-3, 1.1e-3) == pytest.approx(1 / 11)
    assert relative_error(2.0e-6, 1.0e-6, floor=roundoff_floor(1.0, 1e-5)) > THRESHOLD
    assert relative_error(0.0, 0.0) == 0.0


def test_roundoff_floor_tracks_the_loss_magnitude() -> None:
    assert roundoff_floor(0.0, 1.0) == 1e-8
    small, large = roundoff_floor(1.0, 1e-5), roundoff_floor(100.0, 1e-5)
    assert large == pytest.approx(100 * small)
    assert small < 1e-2


def test_check_coordinate_flags_a_relu_kink() -> None:
    def fn(value: np.ndarray) -> float:
        return sum_all(relu(Tensor(value))).item()

    x = np.array([0.0, 0.7])
    error, on_kink = check_coordinate(fn, x, (0,), 0.0, fn(x))
    assert error == pytest.approx(1.0) and on_kink
    error, on_kink = check_coordinate(fn, x, (1,), 1.0, fn(x))
    assert error < 1e-9 and not on_kink


def test_check_group_resamples_kinks_instead_of_failing() -> None:
    def fn(value: np.ndarray) -> float:
        return sum_all(relu(Tensor(value))).item()

    x = np.array([0.0, 0.7, 0.7, 0.7])
    analytic = {"x": np.array([0.0, 1.0, 1.0, 1.0])}
    # seed 0 draws index 0 first, the kink
    result = check_group("relu", {"x": x}, analytic, lambda name: fn, fn(x), SplitMix64(0), samples=2)
    assert result.passed and result.coordinates == 2
    assert result.resamples[0].index == [0] and result.resamples[0].reason == "kink"
    assert all(event.index == [0] for event in result.resamples)


def test_check_group_fails_when_every_coordinate_is_a_kink() -> None:
    def fn(value: np.ndarray) -> float:
        return sum_all(relu(Tensor(value))).item()

    x = np.zeros(3)
    result = check_group("relu", {"x": x}, {"x": np.zeros(3)}, lambda name: fn, 0.0, SplitMix64(1), samples=2)
    assert not result.passed and result.coordinates == 0 and result.resamples


def test_deformable_gradients_match_finite_differences() -> None:
    rng = SplitMix64(2)
    base = conv_params(rng.uniform_tensor([2, 2, 3, 3], -1, 1), rng.uniform_tensor([2], -1, 1))
    x = rng.uniform_tensor([2, 4, 4], -1, 1)
    offsets = rng.uniform_tensor([18, 4, 4], 0.1, 0.4)

    tape = Tape()
    tx, toff = tape.watch(x), tape.watch(offsets)
    grads = tape.backward(sum_all(deformable_conv2d_with_offsets(tx, toff, base)))
    numeric_x = finite_diff_grad(lambda t: sum_all(deformable_conv2d_with_offsets(t, offsets, base)), x).data
    numeric_off = finite_diff_grad(lambda t: sum_all(deformable_conv2d_with_offsets(x, t, base)), offsets).data
    assert _max_relative(grads[tx], numeric_x) <= 1e-5
    assert _max_relative(grads[toff], numeric_off) <= 1e-5


def test_cfe_gradients_match_finite_differences() -> None:
    config = GRAD_CONFIG.model_copy(update={"activation": "none"})
    p = ParamInitializer(3).cfe(3, config)
    x = SplitMix64(4).uniform_tensor([3, 6, 6], -1, 1)
    tape = Tape()
    tx = tape.watch(x)
    analytic = tape.backward(sum_all(cfe_forward(tx, p)))[tx]
    numeric = finite_diff_grad(lambda t: sum_all(cfe_forward(t, p)), x).data
    assert _max_relative(analytic, numeric) <= 1e-5


def test_attention_gradients_with_frozen_routing() -> None:
    rng = SplitMix64(5)
    kernel = rng.uniform_tensor([4, 3, 3], -0.5, 0.5)
    w_q, w_k, w_v = (rng.uniform_tensor([4, 4], -1, 1) for _ in range(3))
    p = bra_params(w_q, w_k, w_v, kernel, regions_per_side=2, topk=2, heads=2)
    f = rng.uniform_tensor([4, 4, 4], -1, 1)
    routing = ba_forward_traced(f, p).routing

    tape = Tape()
    tq = tape.watch(w_q)
    out = ba_forward(f, bra_params(tq, w_k, w_v, kernel, 2, 2, 2), routing=routing)
    analytic = tape.backward(sum_all(out))[tq]

    def loss(t: Tensor) -> Tensor:
        return sum_all(ba_forward(f, bra_params(t, w_k, w_v, kernel, 2, 2, 2), routing=routing))

    assert _max_relative(analytic, finite_diff_grad(loss, w_q).data) <= 1e-5


def test_gradcheck_on_selected_groups() -> None:
    report = cmd_gradcheck(GRAD_CONFIG, 7, groups=["fusion_weights", "lce", "ba_projections"])
    assert [group.group for group in report.groups] == ["ba_projections", "lce", "fusion_weights"]
    assert report.passed
    assert all(group.coordinates == SAMPLES_PER_GROUP and group.max_rel_error <= THRESHOLD for group in report.groups)
    assert "routing" in report.margins


def test_gradcheck_all_groups() -> None:
    report = cmd_gradcheck(GRAD_CONFIG, 7)
    assert [group.group for group in report.groups] == [
        "cfe_kernels",
        "ba_projections",
        "lce",
        "fusion_weights",
        "offsets",
    ]
    assert report.passed, report.model_dump_json(indent=2)


def test_gradcheck_rejects_bad_requests() -> None:
    with pytest.raises(ConfigError, match="float64"):
        cmd_gradcheck(GRAD_CONFIG.model_copy(update={"dtype": "float32"}), 1)
    with pytest.raises(ConfigError, match="unknown gradient groups"):
        cmd_gradcheck(GRAD_CONFIG, 1, groups=["biases"])
