"""
The desk-scale property suite behind `cafbifpn selfcheck`.

Properties register themselves with `@prop(name)`. Each receives the set of injected faults and
raises AssertionError (or any cafbifpn error) when it does not hold.
"""
import logging
from typing import Callable, Iterable, Optional

import numpy as np
from pydantic import BaseModel

from cafbifpn.attention import (
    BraParams,
    MacCounter,
    RegionTokens,
    attention_weights,
    ba_forward,
    ba_forward_traced,
    bra_params,
    gather_kv,
    qkv_project,
    region_merge,
    region_partition,
    region_pool,
    token_attention,
    topk_routing,
)
from cafbifpn.attention.routing import TieBreak
from cafbifpn.cfe import cfe_branch_forward, cfe_forward, cfe_receptive_probe
from cafbifpn.commands.gradcheck import THRESHOLD, roundoff_floor
from cafbifpn.conv import (
    Conv2dParams,
    conv2d,
    conv_params,
    deformable_conv2d,
    deformable_conv2d_with_offsets,
    deformable_params,
    depthwise_conv2d,
)
from cafbifpn.errors import CAFBiFPNError, ConfigError, FormatError
from cafbifpn.io import RunConfig, config_parse, crop_to, pad_to_multiple, tensor_from_bytes, tensor_to_bytes
from cafbifpn.oracles import (
    attention_flops,
    c_afbifpn_reference,
    conv2d_reference,
    dense_attention_reference,
    finite_diff_grad,
    plain_bifpn_reference,
    topk_reference,
)
from cafbifpn.pyramid import (
    LEVELS,
    FusionWeights,
    ParamInitializer,
    PipelineParams,
    PipelineTrace,
    afbifpn_forward,
    c_afbifpn_forward,
    fuse,
    init_pipeline_params,
    resize,
)
from cafbifpn.tensor import (
    RngState,
    SplitMix64,
    Tape,
    Tensor,
    permute,
    rng_next_raw,
    softmax_lastdim,
    structural,
    sum_all,
)

FAULTS = ("topk-tiebreak",)

PropertyFn = Callable[[frozenset], None]
PROPERTIES: dict[str, PropertyFn] = {}


def prop(name: str) -> Callable[[PropertyFn], PropertyFn]:
    def register(fn: PropertyFn) -> PropertyFn:
        PROPERTIES[name] = fn
        return fn

    return register


class PropertyResult(BaseModel):
    name: str
    passed: bool
    detail: str = ""


def _rng(seed: int) -> SplitMix64:
    return SplitMix64(seed)


def _conv(rng: SplitMix64, c_out: int, c_in: int, kh: int, kw: int, **kwargs) -> Conv2dParams:
    return conv_params(rng.uniform_tensor([c_out, c_in, kh, kw], -1, 1), rng.uniform_tensor([c_out], -1, 1), **kwargs)


def _desk_pyramid(rng: SplitMix64, channels: int = 6, extent: int = 16) -> dict[int, Tensor]:
    maps = {}
    for level in range(2, 6):
        side = extent >> (level - 2)
        maps[level] = rng.uniform_tensor([channels, side, side], -1, 1)
    return maps


def _bra(rng: SplitMix64, channels: int, S: int, k: int, heads: int, lce_size: int = 3) -> BraParams:
    projections = [rng.uniform_tensor([channels, channels], -1, 1) for _ in range(3)]
    return bra_params(*projections, Tensor.zeros([channels, lce_size, lce_size]), S, k, heads)


def _assert_gradient(fn: Callable[[Tensor], Tensor], x: Tensor, label: str) -> None:
    """Analytic gradient of sum(fn(x)) against central differences."""
    tape = Tape()
    tracked = tape.watch(x, label)
    loss = sum_all(fn(tracked))
    analytic = tape.backward(loss)[tracked]
    numeric = finite_diff_grad(lambda t: sum_all(fn(t)), x).data
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), roundoff_floor(loss.item(), 1e-5))
    error = float((np.abs(analytic - numeric) / scale).max())
    assert error <= THRESHOLD, f"{label}: max relative error {error:.2e}"


@prop("tensor: SplitMix64 seed 0 yields 0xE220A8397B1DCDAF first")
def _rng_vector(faults: frozenset) -> None:
    _, z = rng_next_raw(RngState(state=0))
    assert z == 0xE220A8397B1DCDAF, f"got {z:#x}"
    assert _rng(0).raw_array(1)[0] == 0xE220A8397B1DCDAF


@prop("tensor: softmax rows sum to one")
def _softmax_rows(faults: frozenset) -> None:
    y = softmax_lastdim(_rng(1).uniform_tensor([5, 7], -30, 30)).data
    assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-12)


@prop("tensor: reshape and permute round-trip bit for bit")
def _structural_roundtrip(faults: frozenset) -> None:
    x = _rng(23).uniform_tensor([3, 4, 5], -1, 1)
    back = structural("reshape", structural("reshape", x, [5, 12]), [3, 4, 5])
    assert back.dims == x.dims and back.data.tobytes() == x.data.tobytes()
    moved = permute(x, (1, 2, 0))
    assert moved.dims == [4, 5, 3]
    assert permute(moved, (2, 0, 1)).data.tobytes() == x.data.tobytes()


@prop("conv: conv2d matches the loop reference")
def _conv_reference(faults: frozenset) -> None:
    rng = _rng(2)
    for kh, kw, dilation in ((3, 3, 1), (3, 3, 2), (1, 5, 1), (5, 1, 1), (1, 1, 1)):
        p = _conv(rng, 2, 3, kh, kw, dilation=dilation)
        x = rng.uniform_tensor([3, 8, 8], -1, 1)
        diff = np.abs(conv2d(x, p).data - conv2d_reference(x, p).data).max()
        assert diff <= 1e-12, f"{kh}x{kw} d={dilation}: max diff {diff}"


@prop("conv: zero offsets make deformable equal to conv2d")
def _deformable_degenerate(faults: frozenset) -> None:
    rng = _rng(3)
    base = _conv(rng, 4, 3, 3, 3)
    zeros = conv_params(Tensor.zeros([18, 3, 3, 3]), Tensor.zeros([18]))
    x = rng.uniform_tensor([3, 9, 7], -1, 1)
    assert np.array_equal(deformable_conv2d(x, deformable_params(base, zeros)).data, conv2d(x, base).data)


@prop("conv: dilated 3x3 impulse support is the dilation")
def _dilation_support(faults: frozenset) -> None:
    p = conv_params(Tensor.ones([1, 1, 3, 3]), Tensor.zeros([1]), dilation=2)
    impulse = np.zeros((1, 11, 11))
    impulse[0, 5, 5] = 1.0
    changed = np.argwhere(conv2d(Tensor(impulse), p).data[0] != 0)
    assert np.abs(changed - 5).max() == 2


@prop("attention: region partition then merge is the identity")
def _partition_roundtrip(faults: frozenset) -> None:
    f = _rng(4).uniform_tensor([3, 8, 12], -1, 1)
    assert np.array_equal(region_merge(region_partition(f, 4)).data, f.data)


@prop("attention: top-k routing matches a full sort with ascending-index ties")
def _topk_matches(faults: frozenset) -> None:
    tie_break: TieBreak = "descending" if "topk-tiebreak" in faults else "ascending"
    rng = _rng(5)
    q = rng.uniform_tensor([4, 3], -1, 1)
    # all-zero keys tie every affinity exactly
    for keys in (rng.uniform_tensor([4, 3], -1, 1), Tensor.zeros([4, 3])):
        routing = topk_routing(q, keys, 2, tie_break=tie_break)
        for row, indices in zip(routing.affinity.data.tolist(), routing.indices.tolist()):
            assert indices == topk_reference(row, 2), f"row {row}: {indices}"


def _relabel_regions(f: Tensor, regions_per_side: int, order: np.ndarray) -> Tensor:
    """The map whose region r holds region order[r] of f."""
    tokens = region_partition(f, regions_per_side)
    return region_merge(tokens.with_data(Tensor(tokens.data.numpy()[order])))


@prop("attention: relabelling regions permutes routing rows and output regions alike")
def _routing_equivariance(faults: frozenset) -> None:
    rng = _rng(24)
    p = _bra(rng, 4, S=4, k=3, heads=2)
    f = rng.uniform_tensor([4, 8, 8], -1, 1)
    order = np.argsort(rng.raw_array(16), kind="stable")
    inverse = np.argsort(order)
    base = ba_forward_traced(f, p)
    moved = ba_forward_traced(_relabel_regions(f, 4, order), p)
    expected = inverse[base.routing.indices[order]]
    assert np.array_equal(moved.routing.indices, expected), f"rows {moved.routing.indices.tolist()}"
    diff = np.abs(moved.output.data - _relabel_regions(base.output, 4, order).data).max()
    assert diff <= 1e-12, f"output regions differ by {diff}"


def _routed_tokens(seed: int, heads: int) -> tuple[RegionTokens, Tensor, Tensor]:
    rng = _rng(seed)
    p = _bra(rng, 4, S=2, k=2, heads=heads)
    queries, keys, values = qkv_project(region_partition(rng.uniform_tensor([4, 8, 8], -3, 3), 2), p)
    routing = topk_routing(region_pool(queries), region_pool(keys), 2)
    K_g, V_g = gather_kv(keys, values, routing)
    return queries, K_g, V_g


@prop("attention: token attention weights are non-negative and sum to one per row")
def _attention_rows(faults: frozenset) -> None:
    queries, K_g, _ = _routed_tokens(25, heads=2)
    weights = attention_weights(queries, K_g, 2)
    assert weights.min() >= 0.0
    gap = np.abs(weights.sum(axis=-1) - 1.0).max()
    assert gap <= 1e-12, f"row sums off by {gap}"


@prop("attention: token attention stays within the range of the gathered values")
def _attention_convex(faults: frozenset) -> None:
    for heads in (1, 2):
        queries, K_g, V_g = _routed_tokens(26, heads)
        out = token_attention(queries, K_g, V_g, heads).data.data
        low, high = V_g.data.min(axis=1, keepdims=True), V_g.data.max(axis=1, keepdims=True)
        assert np.all(out >= low - 1e-12) and np.all(out <= high + 1e-12), f"heads={heads}"


@prop("attention: full routing without local context equals dense attention")
def _full_routing_dense(faults: frozenset) -> None:
    rng = _rng(6)
    for S, heads in ((1, 1), (2, 2), (4, 1)):
        p = bra_params(
            *(rng.uniform_tensor([4, 4], -1, 1) for _ in range(3)),
            lce_kernel=Tensor.zeros([4, 3, 3]),
            regions_per_side=S,
            topk=S * S,
            heads=heads,
        )
        f = rng.uniform_tensor([4, 8, 8], -1, 1)
        diff = np.abs(ba_forward(f, p).data - dense_attention_reference(f, p).data).max()
        assert diff <= 1e-10, f"S={S}, heads={heads}: max diff {diff}"


@prop("attention: runtime MAC counters match the closed form")
def _mac_counts(faults: frozenset) -> None:
    config = RunConfig(fusion_width=6, regions_s=4, topk_k=2, lce_kernel=3)
    p = ParamInitializer(7).bra(config)
    counter = MacCounter()
    ba_forward(_rng(7).uniform_tensor([6, 16, 16], -1, 1), p, counter)
    expected = attention_flops(16, 16, 6, 4, 2, 1, "routed", 3)
    for stage, count in counter.tallies.items():
        assert count == getattr(expected, stage), f"{stage}: counted {count}, expected {getattr(expected, stage)}"
    dense = attention_flops(16, 16, 6, 4, 2, 1, "dense")
    assert expected.qk_logits * 16 == dense.qk_logits * 2


@prop("cfe: receptive probe exceeds a single 3x3 convolution")
def _cfe_probe(faults: frozenset) -> None:
    config = RunConfig(fusion_width=6)
    radius = cfe_receptive_probe(ParamInitializer(8).cfe(2, config))
    assert radius >= 4, f"radius {radius}"


@prop("cfe: output keeps the input extent and has fusion_width channels")
def _cfe_extent(faults: frozenset) -> None:
    p = ParamInitializer(26).cfe(3, RunConfig(fusion_width=6, zero_offsets=False))
    rng = _rng(26)
    for height, width in ((5, 7), (8, 8), (1, 3)):
        out = cfe_forward(rng.uniform_tensor([3, height, width], -1, 1), p)
        assert out.dims == [6, height, width], f"{height}x{width}: dims {out.dims}"


@prop("cfe: zero offset predictor reduces branch 3 to standard convolutions")
def _cfe_branch3_degenerate(faults: frozenset) -> None:
    branch3 = ParamInitializer(27).cfe(3, RunConfig(fusion_width=6, zero_offsets=True)).branch3
    plain = branch3.model_copy(update={"context": branch3.context.base})
    x = _rng(27).uniform_tensor([3, 7, 6], -1, 1)
    for activation in ("none", "relu"):
        a = cfe_branch_forward(x, branch3, activation).data
        assert np.array_equal(a, cfe_branch_forward(x, plain, activation).data), activation


@prop("pyramid: the four ablation configurations all run and agree on output dims")
def _ablations(faults: frozenset) -> None:
    backbone = _desk_pyramid(_rng(28), channels=4)
    for cfe_enabled in (True, False):
        for attention in (True, False):
            config = RunConfig(
                fusion_width=6, lce_kernel=3, cfe_enabled=cfe_enabled, attention_fusion_enabled=attention
            )
            params = init_pipeline_params(config, {level: 4 for level in LEVELS}, seed=2)
            trace = PipelineTrace()
            outputs = c_afbifpn_forward(backbone, params, trace)
            dims = [outputs.outputs[level].dims for level in LEVELS]
            label = f"cfe={cfe_enabled}, attention={attention}"
            assert dims == [[6, 16, 16], [6, 8, 8], [6, 4, 4], [6, 2, 2]], f"{label}: dims {dims}"
            assert trace.ba_invocations == (2 if attention else 0), f"{label}: {trace.ba_invocations} BA"


@prop("pyramid: the full pass matches direct equation substitution")
def _equation_substitution(faults: frozenset) -> None:
    config = RunConfig(fusion_width=6, lce_kernel=3, zero_offsets=False)
    params = init_pipeline_params(config, {level: 4 for level in LEVELS}, seed=29)
    backbone = _desk_pyramid(_rng(29), channels=4)
    out = c_afbifpn_forward(backbone, params).outputs
    reference = c_afbifpn_reference(backbone, params)
    for level in LEVELS:
        diff = np.abs(out[level].data - reference[level].data).max()
        assert diff <= 1e-10, f"P{level}O: max diff {diff}"


@prop("pyramid: fuse output is bounded by its inputs")
def _fuse_bounded(faults: frozenset) -> None:
    rng = _rng(9)
    for n in (1, 2, 3):
        inputs = [rng.uniform_tensor([2, 4, 4], -3, 3) for _ in range(n)]
        out = fuse(inputs, rng.uniform_tensor([n], -1, 2), 1e-4).data
        assert np.abs(out).max() <= max(np.abs(t.data).max() for t in inputs)


@prop("pyramid: negative fusion weights act as zero")
def _fuse_clamp(faults: frozenset) -> None:
    inputs = [_rng(10 + i).uniform_tensor([2, 4, 4], -1, 1) for i in range(3)]
    a = fuse(inputs, Tensor([2.0, -5.0, 3.0]), 1e-4).data
    b = fuse(inputs, Tensor([2.0, 0.0, 3.0]), 1e-4).data
    assert np.array_equal(a, b)


@prop("pyramid: fuse approaches the weighted mean as epsilon shrinks")
def _fuse_epsilon(faults: frozenset) -> None:
    inputs = [_rng(13 + i).uniform_tensor([2, 4, 4], -1, 1) for i in range(2)]
    weights = Tensor([0.75, 1.25])
    mean = fuse(inputs, weights, 0.0).data
    gaps = [np.abs(fuse(inputs, weights, eps).data - mean).max() for eps in (1e-1, 1e-2, 1e-4)]
    assert gaps[0] > gaps[1] > gaps[2], f"gaps {gaps}"


@prop("pyramid: up2 then down2 is the identity")
def _resize_roundtrip(faults: frozenset) -> None:
    f = _rng(15).uniform_tensor([3, 5, 6], -1, 1)
    assert np.array_equal(resize(resize(f, "up2"), "down2").data, f.data)


def _plain_params(epsilon: float = 0.0) -> PipelineParams:
    config = RunConfig(fusion_width=6, cfe_enabled=False, attention_fusion_enabled=False, epsilon=epsilon)
    return init_pipeline_params(config, {level: 6 for level in range(2, 6)}, seed=0)


@prop("pyramid: without attention the pass equals plain BiFPN")
def _plain_reduction(faults: frozenset) -> None:
    inputs = _desk_pyramid(_rng(16))
    out = afbifpn_forward(inputs, _plain_params()).outputs
    reference = plain_bifpn_reference(inputs)
    for level in range(2, 6):
        assert np.abs(out[level].data - reference[level].data).max() <= 1e-12, f"P{level}O"


@prop("pyramid: BA runs exactly twice per pass")
def _ba_count(faults: frozenset) -> None:
    config = RunConfig(fusion_width=6)
    params = init_pipeline_params(config, {level: 6 for level in range(2, 6)}, seed=1)
    trace = PipelineTrace()
    afbifpn_forward(_desk_pyramid(_rng(17)), params, trace)
    assert trace.ba_invocations == 2, f"{trace.ba_invocations} invocations"


@prop("pyramid: fusion is invariant to rescaling all weights of a node when epsilon is 0")
def _fuse_homogeneous(faults: frozenset) -> None:
    inputs = _desk_pyramid(_rng(18))
    params = _plain_params()
    doubled = params.model_copy(update={"fusion": FusionWeights.constant(2.0, 0.0)})
    a, b = afbifpn_forward(inputs, params).outputs, afbifpn_forward(inputs, doubled).outputs
    assert all(np.array_equal(a[level].data, b[level].data) for level in range(2, 6))


@prop("gradients: conv2d backward matches finite differences")
def _conv_gradient(faults: frozenset) -> None:
    rng = _rng(19)
    p = _conv(rng, 2, 2, 3, 3, dilation=2)
    x = rng.uniform_tensor([2, 5, 5], -1, 1)
    _assert_gradient(lambda t: conv2d(t, p), x, "input")
    _assert_gradient(lambda t: conv2d(x, conv_params(t, p.bias, dilation=2)), p.weights, "weights")
    _assert_gradient(lambda t: conv2d(x, conv_params(p.weights, t, dilation=2)), p.bias, "bias")


@prop("gradients: depthwise_conv2d backward matches finite differences")
def _depthwise_gradient(faults: frozenset) -> None:
    rng = _rng(30)
    weights = rng.uniform_tensor([3, 5, 5], -1, 1)
    x = rng.uniform_tensor([3, 6, 5], -1, 1)
    _assert_gradient(lambda t: depthwise_conv2d(t, weights), x, "input")
    _assert_gradient(lambda t: depthwise_conv2d(x, t), weights, "weights")


@prop("gradients: deformable_conv2d backward matches finite differences for input, weights and offsets")
def _deformable_gradient(faults: frozenset) -> None:
    rng = _rng(31)
    base = _conv(rng, 2, 2, 3, 3)
    x = rng.uniform_tensor([2, 5, 5], -1, 1)
    # fractional offsets keep every sample position off the integer lattice
    offsets = rng.uniform_tensor([18, 5, 5], 0.1, 0.4)
    _assert_gradient(lambda t: deformable_conv2d_with_offsets(t, offsets, base), x, "input")
    _assert_gradient(lambda t: deformable_conv2d_with_offsets(x, t, base), offsets, "offsets")
    _assert_gradient(
        lambda t: deformable_conv2d_with_offsets(x, offsets, conv_params(t, base.bias)), base.weights, "weights"
    )


@prop("gradients: BA backward with frozen routing matches finite differences")
def _attention_gradient(faults: frozenset) -> None:
    rng = _rng(32)
    kernel = rng.uniform_tensor([4, 3, 3], -0.5, 0.5)
    w_q, w_k, w_v = (rng.uniform_tensor([4, 4], -1, 1) for _ in range(3))
    p = bra_params(w_q, w_k, w_v, kernel, 2, 2, 2)
    f = rng.uniform_tensor([4, 4, 4], -1, 1)
    routing = ba_forward_traced(f, p).routing
    _assert_gradient(lambda t: ba_forward(t, p, routing=routing), f, "input")
    _assert_gradient(lambda t: ba_forward(f, bra_params(t, w_k, w_v, kernel, 2, 2, 2), routing=routing), w_q, "w_q")
    _assert_gradient(lambda t: ba_forward(f, bra_params(w_q, w_k, t, kernel, 2, 2, 2), routing=routing), w_v, "w_v")
    _assert_gradient(lambda t: ba_forward(f, bra_params(w_q, w_k, w_v, t, 2, 2, 2), routing=routing), kernel, "lce")


@prop("gradients: cfe_forward backward matches finite differences")
def _cfe_gradient(faults: frozenset) -> None:
    p = ParamInitializer(33).cfe(3, RunConfig(fusion_width=6, activation="none"))
    x = _rng(33).uniform_tensor([3, 6, 6], -1, 1)
    _assert_gradient(lambda t: cfe_forward(t, p), x, "input")
    residual = p.residual.weights
    _assert_gradient(
        lambda t: cfe_forward(x, p.model_copy(update={"residual": conv_params(t, p.residual.bias)})),
        residual,
        "residual",
    )


@prop("gradients: raw fusion weights match finite differences")
def _fusion_gradient(faults: frozenset) -> None:
    rng = _rng(34)
    inputs = [rng.uniform_tensor([2, 4, 4], -1, 1) for _ in range(3)]
    _assert_gradient(lambda t: fuse(inputs, t, 1e-4), Tensor([0.8, 1.7, 0.5]), "weights")


@prop("io: tensor files round-trip bit for bit")
def _tensor_roundtrip(faults: frozenset) -> None:
    rng = _rng(20)
    for dims, dtype in (([3, 4, 5], "float64"), ([7], "float32"), ([2, 1, 3, 1], "float64")):
        t = rng.uniform_tensor(dims, -1, 1, dtype)
        back = tensor_from_bytes(tensor_to_bytes(t))
        assert back.dtype == t.dtype and back.data.tobytes() == t.data.tobytes()


@prop("io: malformed tensor files raise FormatError")
def _tensor_malformed(faults: frozenset) -> None:
    blob = tensor_to_bytes(_rng(21).uniform_tensor([3, 4], -1, 1))
    corpus = [b"XXXX" + blob[4:], blob[:-3], blob[:5] + bytes([7]) + blob[6:], blob[:4] + bytes([2]) + blob[5:], b""]
    for bad in corpus:
        try:
            tensor_from_bytes(bad)
        except FormatError:
            continue
        raise AssertionError(f"accepted malformed file of {len(bad)} bytes")


@prop("io: config invariants are enforced")
def _config_rules(faults: frozenset) -> None:
    assert config_parse("{}") == RunConfig()
    for text, rule in (('{"fusion_width": 50}', "fusion_width % 3"), ('{"topk_k": 5}', "topk_k ≤ S²")):
        try:
            config_parse(text)
        except ConfigError as e:
            assert rule in str(e), str(e)
            continue
        raise AssertionError(f"{text} accepted")


@prop("io: pad to a multiple then crop is the identity")
def _pad_crop(faults: frozenset) -> None:
    f = _rng(22).uniform_tensor([2, 7, 5], -1, 1)
    padded = pad_to_multiple(f, 4)
    assert padded.dims == [2, 8, 8]
    assert np.array_equal(crop_to(padded, 7, 5).data, f.data)


def cmd_selfcheck(inject_fault: Optional[str] = None, only: Optional[Iterable[str]] = None) -> list[PropertyResult]:
    if inject_fault is not None and inject_fault not in FAULTS:
        raise ConfigError(f"unknown fault: {inject_fault}, expected one of {list(FAULTS)}")
    faults = frozenset([inject_fault] if inject_fault else [])
    selected = set(only) if only is not None else None
    results = []
    for name, check in PROPERTIES.items():
        if selected is not None and name not in selected:
            continue
        try:
            check(faults)
            results.append(PropertyResult(name=name, passed=True))
        except (AssertionError, CAFBiFPNError, IndexError) as e:
            results.append(PropertyResult(name=name, passed=False, detail=str(e) or type(e).__name__))
        logging.debug(f"{name}: {'pass' if results[-1].passed else 'FAIL'}")
    return results
