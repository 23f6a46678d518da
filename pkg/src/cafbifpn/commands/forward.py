import logging
import os
from pathlib import Path
from typing import Union

import numpy as np
from pydantic import BaseModel

from cafbifpn.io import RunConfig, load_backbone, tensor_write
from cafbifpn.pyramid import PipelineTrace, PyramidLevels, c_afbifpn_forward, init_pipeline_params
from cafbifpn.tensor import Tensor

REPORT_NAME = "report.json"


class LevelStats(BaseModel):
    level: int
    dims: list[int]
    min: float
    max: float
    mean: float
    l2_norm: float


class ForwardReport(BaseModel):
    seed: int
    ba_invocations: int
    outputs: list[LevelStats]
    macs: dict[str, dict[str, int]]


def level_stats(level: int, t: Tensor) -> LevelStats:
    data = t.data
    return LevelStats(
        level=level,
        dims=t.dims,
        min=float(data.min()),
        max=float(data.max()),
        mean=float(data.mean()),
        l2_norm=float(np.sqrt(np.square(data, dtype=np.float64).sum())),
    )


def run_forward(config: RunConfig, backbone: dict[int, Tensor]) -> tuple[PyramidLevels, PipelineTrace]:
    backbone = {level: t.astype(config.dtype) for level, t in backbone.items()}
    params = init_pipeline_params(config, {level: t.shape[0] for level, t in backbone.items()})
    trace = PipelineTrace()
    logging.info("Running the forward pass...")
    levels = c_afbifpn_forward(backbone, params, trace)
    logging.info(f"Forward pass finished with {trace.ba_invocations} BA invocations")
    return levels, trace


def cmd_forward(
    config: RunConfig, input_dir: Union[str, os.PathLike], out_dir: Union[str, os.PathLike]
) -> ForwardReport:
    """Run the pipeline on a fixture directory, writing P2O..P5O and a JSON report to `out_dir`."""
    levels, trace = run_forward(config, load_backbone(input_dir))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stats = []
    for level, t in sorted(levels.outputs.items()):
        tensor_write(out / f"P{level}O.tnsr", t)
        stats.append(level_stats(level, t))
    report = ForwardReport(
        seed=config.seed,
        ba_invocations=trace.ba_invocations,
        outputs=stats,
        macs={f"P{level}F": dict(counter.tallies) for level, counter in sorted(trace.macs.items())},
    )
    (out / REPORT_NAME).write_text(report.model_dump_json(indent=2) + "\n")
    return report
