"""Dense versus routed attention: wall time and exact MAC counts over a sweep of extents and routing sizes."""
import logging
import time
from fractions import Fraction
from typing import Iterable, Optional

from pydantic import BaseModel

from cafbifpn.attention import MacCounter, ba_forward
from cafbifpn.io.config import RunConfig
from cafbifpn.oracles import FlopCount, attention_flops
from cafbifpn.pyramid import ParamInitializer
from cafbifpn.tensor import SplitMix64

DEFAULT_EXTENTS = (8, 16, 32)
DEFAULT_REGIONS = (2, 4)
RATIO_STAGES = ("qk_logits", "av_aggregation")


class BenchPoint(BaseModel):
    H: int
    W: int
    S: int
    k: int
    dense_seconds: float
    routed_seconds: float
    dense_macs: dict[str, int]
    routed_macs: dict[str, int]
    qk_ratio: float
    av_ratio: float
    expected_ratio: float
    ratio_exact: bool
    counters_match: bool


class BenchReport(BaseModel):
    channels: int
    heads: int
    points: list[BenchPoint]
    passed: bool


def default_sweep(config: RunConfig) -> list[tuple[int, int, int, int]]:
    points = {(16, 16, config.regions_s, config.topk_k)}
    for extent in DEFAULT_EXTENTS:
        for S in DEFAULT_REGIONS:
            for k in sorted({1, 2, S * S}):
                points.add((extent, extent, S, k))
    return sorted(points)


def _time(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def _counters_match(counter: MacCounter, expected: FlopCount) -> bool:
    return all(counter[stage] == getattr(expected, stage) for stage in RATIO_STAGES)


def bench_point(config: RunConfig, H: int, W: int, S: int, k: int, repeats: int = 3) -> BenchPoint:
    channels = config.fusion_width
    init = ParamInitializer(config.seed, config.dtype)
    routed_cfg = config.model_copy(update={"regions_s": S, "topk_k": k, "zero_lce": True})
    dense_cfg = config.model_copy(update={"regions_s": 1, "topk_k": 1, "zero_lce": True})
    routed_params, dense_params = init.bra(routed_cfg), init.bra(dense_cfg)
    f = SplitMix64(config.seed).uniform_tensor([channels, H, W], -1.0, 1.0, config.dtype)

    routed_counter, dense_counter = MacCounter(), MacCounter()
    ba_forward(f, routed_params, routed_counter)
    ba_forward(f, dense_params, dense_counter)
    routed_seconds = _time(lambda: ba_forward(f, routed_params), repeats)
    dense_seconds = _time(lambda: ba_forward(f, dense_params), repeats)

    routed = attention_flops(H, W, channels, S, k, config.heads, "routed", config.lce_kernel)
    dense = attention_flops(H, W, channels, S, k, config.heads, "dense", config.lce_kernel)
    expected = Fraction(k, S * S)
    qk, av = routed.ratio(dense, "qk_logits"), routed.ratio(dense, "av_aggregation")
    logging.info(f"H={H} W={W} S={S} k={k}: routed {routed_seconds:.4f}s, dense {dense_seconds:.4f}s, ratio {qk}")
    return BenchPoint(
        H=H,
        W=W,
        S=S,
        k=k,
        dense_seconds=dense_seconds,
        routed_seconds=routed_seconds,
        dense_macs=dict(dense_counter.tallies),
        routed_macs=dict(routed_counter.tallies),
        qk_ratio=float(qk),
        av_ratio=float(av),
        expected_ratio=float(expected),
        ratio_exact=qk == expected and av == expected,
        counters_match=_counters_match(routed_counter, routed) and _counters_match(dense_counter, dense),
    )


def cmd_bench(
    config: RunConfig, sweep: Optional[Iterable[tuple[int, int, int, int]]] = None, repeats: int = 3
) -> BenchReport:
    points = [bench_point(config, *point, repeats=repeats) for point in (sweep or default_sweep(config))]
    return BenchReport(
        channels=config.fusion_width,
        heads=config.heads,
        points=points,
        passed=all(p.ratio_exact and p.counters_match for p in points),
    )
