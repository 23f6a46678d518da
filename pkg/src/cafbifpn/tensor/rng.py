"""SplitMix64 stream shared by every fixture and parameter initialiser."""
from typing import Annotated, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from cafbifpn.tensor.core import DTypeName, Tensor

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
TWO_POW_MINUS_53 = 2.0**-53


class RngState(BaseModel):
    model_config = ConfigDict(frozen=True)

    state: Annotated[int, Field(ge=0, le=MASK64)] = 0


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


def rng_next_raw(state: RngState) -> tuple[RngState, int]:
    advanced = (state.state + GOLDEN_GAMMA) & MASK64
    return RngState(state=advanced), _mix(advanced)


def rng_next(state: RngState) -> tuple[RngState, float]:
    """One SplitMix64 step; the float is (z >> 11) * 2^-53, in [0, 1)."""
    next_state, z = rng_next_raw(state)
    return next_state, (z >> 11) * TWO_POW_MINUS_53


class SplitMix64:
    """Stateful wrapper over the SplitMix64 recurrence with vectorised bulk draws."""

    def __init__(self, seed: int) -> None:
        self.state = RngState(state=seed & MASK64)

    def next_raw(self) -> int:
        self.state, z = rng_next_raw(self.state)
        return z

    def next_float(self) -> float:
        self.state, u = rng_next(self.state)
        return u

    def raw_array(self, n: int) -> np.ndarray:
        """The next n raw outputs as uint64, identical to n calls of next_raw."""
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state.state) + steps * np.uint64(GOLDEN_GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
            z = z ^ (z >> np.uint64(31))
        self.state = RngState(state=(self.state.state + n * GOLDEN_GAMMA) & MASK64)
        return z

    def uniform(self, n: int) -> np.ndarray:
        """The next n draws in [0, 1) as float64."""
        return (self.raw_array(n) >> np.uint64(11)).astype(np.float64) * TWO_POW_MINUS_53

    def uniform_tensor(
        self, dims: Sequence[int], low: float = 0.0, high: float = 1.0, dtype: DTypeName = "float64"
    ) -> Tensor:
        """Row-major tensor of draws mapped affinely from [0, 1) onto [low, high)."""
        count = int(np.prod(dims))
        values = low + (high - low) * self.uniform(count)
        return Tensor(values.reshape(tuple(dims)), dtype=dtype)
