"""Closed-form MAC accounting for dense and routed token attention."""
from fractions import Fraction
from typing import Literal

from pydantic import BaseModel, ConfigDict, NonNegativeInt

from cafbifpn.errors import ConfigError, PartitionError

AttentionMode = Literal["dense", "routed"]


class FlopCount(BaseModel):
    """Exact multiply-accumulate tallies per stage. `gather` counts copied elements."""

    model_config = ConfigDict(frozen=True)

    projection: NonNegativeInt = 0
    routing: NonNegativeInt = 0
    gather: NonNegativeInt = 0
    qk_logits: NonNegativeInt = 0
    av_aggregation: NonNegativeInt = 0
    lce: NonNegativeInt = 0

    @property
    def total_macs(self) -> int:
        return self.projection + self.routing + self.qk_logits + self.av_aggregation + self.lce

    def ratio(self, other: "FlopCount", stage: str) -> Fraction:
        """This count over `other` for one stage, as an exact fraction."""
        return Fraction(getattr(self, stage), getattr(other, stage))


def attention_flops(
    H: int, W: int, C: int, S: int, k: int, heads: int = 1, mode: AttentionMode = "routed", lce_kernel: int = 0
) -> FlopCount:
    """
    MACs of one attention pass over an H x W x C map.

    Dense: every token scores all HW tokens. Routed: each token scores the k routed regions of
    HW / S^2 tokens, after S^4 C affinity MACs and one HW C pooling pass.
    `lce_kernel` > 0 adds the depthwise local-context term HW C k^2.
    """
    if min(H, W, C, S, heads) < 1 or C % heads:
        raise ConfigError(f"attention_flops: invalid dims H={H}, W={W}, C={C}, S={S}, heads={heads}")
    if H % S or W % S:
        raise PartitionError(f"attention_flops: H={H}, W={W} not divisible by S={S}")
    if not 1 <= k <= S * S:
        raise ConfigError(f"topk_k <= S^2 violated: k={k}, S={S}")
    tokens = H * W
    common = dict(projection=3 * tokens * C * C, lce=tokens * C * lce_kernel * lce_kernel)
    if mode == "dense":
        return FlopCount(qk_logits=tokens * tokens * C, av_aggregation=tokens * tokens * C, **common)
    per_region = tokens // (S * S)
    routed_keys = k * per_region
    return FlopCount(
        routing=S**4 * C + tokens * C,
        gather=2 * S * S * routed_keys * C,
        qk_logits=tokens * routed_keys * C,
        av_aggregation=tokens * routed_keys * C,
        **common,
    )
