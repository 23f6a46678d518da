import json
from typing import Annotated, Any, Literal

from pydantic import BaseModel, ConfigDict, Field, NonNegativeFloat, PositiveInt, ValidationError, model_validator

from cafbifpn.errors import ConfigError

MAX_SEED = 2**64 - 1


class RunConfig(BaseModel):
    """Flat run configuration. Unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    regions_s: PositiveInt = 2
    topk_k: PositiveInt = 2
    heads: PositiveInt = 1
    fusion_width: PositiveInt = 48
    epsilon: NonNegativeFloat = 1e-4
    dilation: PositiveInt = 2
    lce_kernel: PositiveInt = 5
    activation: Literal["none", "relu"] = "relu"
    cfe_enabled: bool = True
    attention_fusion_enabled: bool = True
    # "output" parses but check_rules rejects it: P5O -> P4O -> P4F would form a cycle
    topdown_source: Literal["input", "output"] = "input"
    seed: Annotated[int, Field(ge=0, le=MAX_SEED)] = 0
    dtype: Literal["float32", "float64"] = "float64"
    zero_offsets: bool = True
    zero_lce: bool = False

    @model_validator(mode="after")
    def check_rules(self) -> "RunConfig":
        if self.fusion_width % 3:
            raise ValueError(f"fusion_width % 3 == 0 violated: fusion_width={self.fusion_width}")
        if self.topk_k > self.regions_s**2:
            raise ValueError(f"topk_k ≤ S² violated: topk_k={self.topk_k}, regions_s={self.regions_s}")
        if self.fusion_width % self.heads:
            raise ValueError(
                f"heads divides fusion_width violated: heads={self.heads}, fusion_width={self.fusion_width}"
            )
        if self.lce_kernel % 2 == 0:
            raise ValueError(f"lce_kernel must be odd: lce_kernel={self.lce_kernel}")
        if self.topdown_source == "output":
            raise ValueError("topdown_source=output is cyclic: P5O depends on P4O, which depends on P4F")
        return self


def _describe(error: ValidationError) -> str:
    messages = []
    for detail in error.errors():
        location = ".".join(str(part) for part in detail["loc"]) or "config"
        if detail["type"] == "extra_forbidden":
            messages.append(f"unknown key: {location}")
        else:
            messages.append(f"{location}: {detail['msg']}")
    return "; ".join(messages)


def config_from_dict(values: dict[str, Any]) -> RunConfig:
    try:
        return RunConfig(**values)
    except ValidationError as e:
        raise ConfigError(_describe(e)) from e


def config_parse(text: str) -> RunConfig:
    """Parse a flat JSON object into a RunConfig, applying defaults for missing keys."""
    try:
        values = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(values, dict):
        raise ConfigError("config must be a flat JSON object")
    for key, value in values.items():
        if isinstance(value, (dict, list)):
            raise ConfigError(f"config must be flat, key {key} holds a nested value")
    return config_from_dict(values)
