"""
Analytic gradients of the full pipeline against central finite differences.

The scalar checked is the sum of every stage-O map. Routing is frozen at the routing of the
unperturbed pass. A sampled coordinate whose one-sided differences disagree by more than its
analytic-vs-numeric error sits on a kink (relu, the bilinear lattice); it is replaced by another
coordinate and the replacement is reported as a resample event.
"""
import logging
from typing import Callable, Optional

import numpy as np
from pydantic import BaseModel, Field

from cafbifpn.attention import RoutingResult
from cafbifpn.errors import ConfigError, NumericError
from cafbifpn.io.config import RunConfig
from cafbifpn.pyramid import PipelineParams, PipelineTrace, c_afbifpn_forward, init_pipeline_params
from cafbifpn.tensor import SplitMix64, Tape, Tensor, add_n, map_tensors, named_tensors, sum_all, watch_tensors

THRESHOLD = 1e-5
SAMPLES_PER_GROUP = 12
MAX_RESAMPLES = 24
MIN_SCALE = 1e-8
ROUNDOFF_ULPS = 64
FUSION_MARGIN = 1e-3
DESK_CHANNELS = {2: 8, 3: 8, 4: 8, 5: 8}
DESK_EXTENT = 16

GROUPS: dict[str, Callable[[str], bool]] = {
    "cfe_kernels": lambda name: name.startswith(("cfe.", "projection.")) and ".offset_predictor." not in name,
    "ba_projections": lambda name: name.startswith("bra.") and name.rsplit(".", 1)[-1] in ("w_q", "w_k", "w_v"),
    "lce": lambda name: name.startswith("bra.") and name.endswith(".lce_kernel"),
    "fusion_weights": lambda name: name.startswith("fusion."),
    "offsets": lambda name: ".offset_predictor." in name,
}


class ResampleEvent(BaseModel):
    group: str
    tensor: str
    index: list[int]
    reason: str


class GroupResult(BaseModel):
    group: str
    coordinates: int = 0
    max_rel_error: float = 0.0
    passed: bool = True
    resamples: list[ResampleEvent] = Field(default_factory=list)


class GradcheckReport(BaseModel):
    seed: int
    threshold: float = THRESHOLD
    groups: list[GroupResult]
    margins: dict[str, float]
    passed: bool


def relative_error(analytic: float, numeric: float, floor: float = MIN_SCALE) -> float:
    """|a - n| / max(|a|, |n|, floor)."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def roundoff_floor(f0: float, step: float) -> float:
    """Gradient magnitude below which round-off in fn alone can reach THRESHOLD relative error."""
    resolution = ROUNDOFF_ULPS * float(np.finfo(np.float64).eps) * max(abs(f0), 1.0) / step
    return max(MIN_SCALE, resolution / THRESHOLD)


def check_coordinate(
    fn: Callable[[np.ndarray], float], x: np.ndarray, index: tuple[int, ...], analytic: float, f0: float
) -> tuple[float, bool]:
    """(relative error, sits on a kink) for one coordinate of x, using h = 1e-5 * max(1, |x_i|)."""
    step = 1e-5 * max(1.0, abs(float(x[index])))
    shifted = x.copy()
    shifted[index] = x[index] + step
    upper = fn(shifted)
    shifted[index] = x[index] - step
    lower = fn(shifted)
    if not all(np.isfinite([upper, lower])):
        raise NumericError(f"gradcheck: non-finite evaluation at {list(index)}")
    numeric = (upper - lower) / (2.0 * step)
    error = relative_error(analytic, numeric, roundoff_floor(f0, step))
    one_sided_gap = abs((upper - f0) - (f0 - lower)) / step
    return error, error > THRESHOLD and one_sided_gap >= abs(analytic - numeric)


def check_group(
    group: str,
    tensors: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    fn_for: Callable[[str], Callable[[np.ndarray], float]],
    f0: float,
    rng: SplitMix64,
    samples: int = SAMPLES_PER_GROUP,
) -> GroupResult:
    """Check `samples` coordinates drawn over the tensors of one group, replacing kink coordinates."""
    result = GroupResult(group=group)
    names = sorted(tensors)
    if not names:
        return result
    budget = samples + MAX_RESAMPLES
    while result.coordinates < samples and budget > 0:
        budget -= 1
        name = names[int(rng.next_raw() % len(names))]
        x = tensors[name]
        index = np.unravel_index(int(rng.next_raw() % x.size), x.shape)
        error, on_kink = check_coordinate(fn_for(name), x, index, float(analytic[name][index]), f0)
        if on_kink:
            event = ResampleEvent(group=group, tensor=name, index=list(map(int, index)), reason="kink")
            logging.debug(f"Resampling {name}{list(index)}: one-sided differences disagree")
            result.resamples.append(event)
            continue
        result.coordinates += 1
        result.max_rel_error = max(result.max_rel_error, error)
    result.passed = result.max_rel_error <= THRESHOLD and result.coordinates == samples
    return result


def _loss(outputs: dict[int, Tensor]) -> Tensor:
    return add_n([sum_all(t) for _, t in sorted(outputs.items())])


def _total(outputs: dict[int, Tensor]) -> float:
    return float(sum(t.data.sum() for _, t in sorted(outputs.items())))


def desk_backbone(seed: int) -> dict[int, Tensor]:
    rng = SplitMix64(seed ^ 0x5DEECE66D)
    return {
        level: rng.uniform_tensor([channels, DESK_EXTENT >> (level - 2), DESK_EXTENT >> (level - 2)], -1.0, 1.0)
        for level, channels in DESK_CHANNELS.items()
    }


def _replace(params: PipelineParams, target: str, value: np.ndarray) -> PipelineParams:
    return map_tensors(params, lambda name, t: Tensor(value) if name == target else t)


def _resample_fusion(config: RunConfig, seed: int) -> tuple[PipelineParams, list[ResampleEvent]]:
    """Parameters whose fusion weights all sit at least FUSION_MARGIN away from the clamp at zero."""
    events = []
    for attempt in range(MAX_RESAMPLES):
        params = init_pipeline_params(config, DESK_CHANNELS, seed + attempt)
        weights = params.fusion.named()
        near = [name for name, value in weights.items() if abs(value) < FUSION_MARGIN]
        if not near:
            return params, events
        events.append(ResampleEvent(group="fusion_weights", tensor=near[0], index=[], reason="clamp margin"))
    raise NumericError("gradcheck: could not draw fusion weights away from the clamp")


def cmd_gradcheck(config: RunConfig, seed: int, groups: Optional[list[str]] = None) -> GradcheckReport:
    if config.dtype != "float64":
        raise ConfigError("gradcheck needs dtype float64")
    unknown = [g for g in groups or [] if g not in GROUPS]
    if unknown:
        raise ConfigError(f"unknown gradient groups: {unknown}")
    # offsets must be non-zero so sampling positions are fractional
    config = config.model_copy(update={"zero_offsets": False, "zero_lce": False})
    params, fusion_events = _resample_fusion(config, seed)
    backbone = desk_backbone(seed)

    tape = Tape()
    tracked = watch_tensors(params, tape)
    trace = PipelineTrace()
    levels = c_afbifpn_forward(backbone, tracked, trace)
    loss = _loss(levels.outputs)
    analytic = tape.backward(loss).leaves()
    frozen: dict[int, RoutingResult] = dict(trace.routing)
    f0 = _total(levels.outputs)
    logging.info(f"Loss of the unperturbed pass: {f0:.6f}")

    def fn_for(name: str) -> Callable[[np.ndarray], float]:
        def fn(value: np.ndarray) -> float:
            return _total(c_afbifpn_forward(backbone, _replace(params, name, value), frozen_routing=frozen).outputs)

        return fn

    values = dict(named_tensors(params))
    rng = SplitMix64(seed)
    results = []
    for group, member in GROUPS.items():
        if groups and group not in groups:
            continue
        tensors = {name: t.numpy() for name, t in values.items() if member(name)}
        result = check_group(group, tensors, analytic, fn_for, f0, rng)
        if group == "fusion_weights":
            result.resamples = fusion_events + result.resamples
        logging.info(f"{group}: max relative error {result.max_rel_error:.3e} over {result.coordinates} coordinates")
        results.append(result)

    return GradcheckReport(
        seed=seed,
        groups=results,
        margins=tape.margins(),
        passed=all(r.passed for r in results),
    )
