"""
The attention-fusion BiFPN and the full feature-enhancement + fusion pipeline.

One pass evaluates the fusion DAG top-down then bottom-up:

    P4F = fuse(P4I, up(P5I))             A4 = BA(P4F)
    P3F = fuse(P3I, up(A4))              A3 = BA(P3F)
    P2O = fuse(P2I, up(A3))
    P3O = fuse(P3I, A3, down(P2O))
    P4O = fuse(P4I, A4, down(P3O))
    P5O = fuse(P5I, down(P4O))

A4 and A3 are each computed once and shared by the two nodes that read them.
"""
import logging
from contextlib import contextmanager
from typing import Iterator, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from cafbifpn.attention import BraParams, MacCounter, RoutingResult, ba_forward_traced
from cafbifpn.cfe import CfeParams, cfe_forward
from cafbifpn.conv import Conv2dParams, conv2d
from cafbifpn.errors import CAFBiFPNError, PipelineError
from cafbifpn.pyramid.fusion import FusionWeights, fuse, resize
from cafbifpn.tensor import Tensor

LEVELS = (2, 3, 4, 5)
REFINED_LEVELS = (4, 3)


class PyramidLevels(BaseModel):
    """Feature maps of one pass keyed by level, for the input (I), intermediate (F) and output (O) stages."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    inputs: dict[int, Tensor]
    intermediate: dict[int, Tensor] = Field(default_factory=dict)
    outputs: dict[int, Tensor] = Field(default_factory=dict)

    def get(self, level: int, stage: Literal["I", "F", "O"]) -> Tensor:
        maps = {"I": self.inputs, "F": self.intermediate, "O": self.outputs}[stage]
        if level not in maps:
            raise PipelineError(f"P{level}{stage}", "no such node in this pass")
        return maps[level]


class PipelineParams(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    fusion: FusionWeights
    cfe: Optional[dict[int, CfeParams]] = None
    projection: Optional[dict[int, Conv2dParams]] = None
    bra: Optional[dict[int, BraParams]] = None
    resize_mode: Literal["nearest"] = "nearest"
    cfe_enabled: bool = True
    attention_fusion_enabled: bool = True
    topdown_source: Literal["input", "output"] = "input"

    @model_validator(mode="after")
    def check_components(self) -> "PipelineParams":
        enhancers = self.cfe if self.cfe_enabled else self.projection
        if enhancers is None or sorted(enhancers) != list(LEVELS):
            kind = "cfe" if self.cfe_enabled else "projection"
            raise ValueError(f"{kind} parameters are required for levels {list(LEVELS)}")
        if self.attention_fusion_enabled and (self.bra is None or sorted(self.bra) != sorted(REFINED_LEVELS)):
            raise ValueError(f"bra parameters are required for levels {sorted(REFINED_LEVELS)}")
        return self


class PipelineTrace(BaseModel):
    """What a pass did: BA invocation count, the routing used at each refined level, and MAC tallies."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    ba_invocations: int = 0
    routing: dict[int, RoutingResult] = Field(default_factory=dict)
    macs: dict[int, MacCounter] = Field(default_factory=dict)


@contextmanager
def _node(name: str) -> Iterator[None]:
    logging.debug(f"Evaluating {name}...")
    try:
        yield
    except PipelineError:
        raise
    except CAFBiFPNError as e:
        raise PipelineError(name, str(e)) from e


def _check_inputs(inputs: dict[int, Tensor]) -> None:
    for level in LEVELS:
        if level not in inputs:
            raise PipelineError(f"P{level}I", "missing input level")
        if inputs[level].rank != 3:
            raise PipelineError(f"P{level}I", f"expected a [C, H, W] map, got dims {inputs[level].dims}")
    channels, height, width = inputs[2].shape
    for level in LEVELS[1:]:
        factor = 2 ** (level - 2)
        expected = [channels, height // factor, width // factor]
        if height % factor or width % factor or inputs[level].dims != expected:
            raise PipelineError(f"P{level}I", f"dims {inputs[level].dims}, expected {expected}")


def afbifpn_forward(
    inputs: dict[int, Tensor],
    params: PipelineParams,
    trace: Optional[PipelineTrace] = None,
    frozen_routing: Optional[dict[int, RoutingResult]] = None,
) -> PyramidLevels:
    """Evaluate the fusion DAG on stage-I maps. `trace` is filled in when given."""
    if params.topdown_source != "input":
        raise PipelineError("P4F", "topdown_source=output is cyclic: P5O depends on P4O, which depends on P4F")
    _check_inputs(inputs)
    trace = trace if trace is not None else PipelineTrace()
    frozen_routing = frozen_routing or {}
    weights = params.fusion
    eps = weights.epsilon

    def refine(level: int, f: Tensor) -> Tensor:
        if not params.attention_fusion_enabled:
            return f
        with _node(f"BA(P{level}F)"):
            counter = MacCounter()
            result = ba_forward_traced(f, params.bra[level], counter, routing=frozen_routing.get(level))
        trace.ba_invocations += 1
        trace.routing[level] = result.routing
        trace.macs[level] = counter
        return result.output

    p2i, p3i, p4i, p5i = (inputs[level] for level in LEVELS)
    with _node("P4F"):
        p4f = fuse([p4i, resize(p5i, "up2")], weights.p4f, eps)
    a4 = refine(4, p4f)
    with _node("P3F"):
        p3f = fuse([p3i, resize(a4, "up2")], weights.p3f, eps)
    a3 = refine(3, p3f)
    with _node("P2O"):
        p2o = fuse([p2i, resize(a3, "up2")], weights.p2o, eps)
    with _node("P3O"):
        p3o = fuse([p3i, a3, resize(p2o, "down2")], weights.p3o, eps)
    with _node("P4O"):
        p4o = fuse([p4i, a4, resize(p3o, "down2")], weights.p4o, eps)
    with _node("P5O"):
        p5o = fuse([p5i, resize(p4o, "down2")], weights.p5o, eps)

    logging.debug(f"Fusion pass finished with {trace.ba_invocations} BA evaluations")
    return PyramidLevels(
        inputs=dict(inputs),
        intermediate={3: p3f, 4: p4f},
        outputs={2: p2o, 3: p3o, 4: p4o, 5: p5o},
    )


def enhance(backbone: dict[int, Tensor], params: PipelineParams) -> dict[int, Tensor]:
    """Stage-I maps: CFE per backbone level, or the plain 1x1 projection when CFE is disabled."""
    enhanced = {}
    for level in LEVELS:
        if level not in backbone:
            raise PipelineError(f"C{level}", "missing backbone level")
        if params.cfe_enabled:
            with _node(f"CFE(C{level})"):
                enhanced[level] = cfe_forward(backbone[level], params.cfe[level])
        else:
            with _node(f"Projection(C{level})"):
                enhanced[level] = conv2d(backbone[level], params.projection[level])
    return enhanced


def c_afbifpn_forward(
    backbone: dict[int, Tensor],
    params: PipelineParams,
    trace: Optional[PipelineTrace] = None,
    frozen_routing: Optional[dict[int, RoutingResult]] = None,
) -> PyramidLevels:
    for level in LEVELS[1:]:
        if level in backbone and level - 1 in backbone:
            below, above = backbone[level - 1].shape[1:], backbone[level].shape[1:]
            if below != tuple(2 * extent for extent in above):
                raise PipelineError(f"C{level}", f"spatial extents {list(above)} are not half of {list(below)}")
    return afbifpn_forward(enhance(backbone, params), params, trace, frozen_routing)
