from typing import Optional

from cafbifpn.errors import ConfigError
from cafbifpn.tensor import Tensor, matmul

STAGES = ("projection", "routing", "gather", "qk_logits", "av_aggregation", "lce")


class MacCounter:
    """Multiply-accumulate tallies per attention stage, taken from the extents of the operands used.

    The gather stage counts copied key and value elements rather than MACs.
    """

    def __init__(self) -> None:
        self.tallies: dict[str, int] = {stage: 0 for stage in STAGES}

    def add(self, stage: str, count: int) -> None:
        if stage not in self.tallies:
            raise ConfigError(f"unknown MAC stage: {stage}")
        self.tallies[stage] += int(count)

    def matmul(self, stage: str, a: Tensor, b: Tensor) -> Tensor:
        result = matmul(a, b)
        self.add(stage, a.shape[0] * a.shape[1] * b.shape[1])
        return result

    def merge(self, other: "MacCounter") -> None:
        for stage, count in other.tallies.items():
            self.tallies[stage] += count

    def __getitem__(self, stage: str) -> int:
        return self.tallies[stage]


def counted_matmul(a: Tensor, b: Tensor, counter: Optional[MacCounter], stage: str) -> Tensor:
    if counter is None:
        return matmul(a, b)
    return counter.matmul(stage, a, b)
