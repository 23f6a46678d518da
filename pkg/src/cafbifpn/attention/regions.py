from pydantic import BaseModel, ConfigDict, PositiveInt, ValidationError, model_validator

from cafbifpn.errors import PartitionError, ShapeError
from cafbifpn.tensor import Tensor, rearrange

PARTITION_PATTERN = "c (sy h) (sx w) -> (sy sx) (h w) c"
MERGE_PATTERN = "(sy sx) (h w) c -> c (sy h) (sx w)"


class RegionTokens(BaseModel):
    """Tokens [S^2, n, C] of an S x S tiling of a [C, H, W] map, regions and pixels in row-major order."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    data: Tensor
    height: PositiveInt
    width: PositiveInt
    regions_per_side: PositiveInt

    @model_validator(mode="after")
    def check_geometry(self) -> "RegionTokens":
        s = self.regions_per_side
        if self.height % s or self.width % s:
            raise ValueError(f"H={self.height}, W={self.width} not divisible by S={s}")
        expected = [s * s, (self.height // s) * (self.width // s)]
        if self.data.rank != 3 or self.data.dims[:2] != expected:
            raise ValueError(f"token dims {self.data.dims} inconsistent with H={self.height}, W={self.width}, S={s}")
        return self

    @property
    def region_count(self) -> int:
        return self.regions_per_side**2

    @property
    def tokens_per_region(self) -> int:
        return self.data.dims[1]

    @property
    def channels(self) -> int:
        return self.data.dims[2]

    def with_data(self, data: Tensor) -> "RegionTokens":
        """Same tiling, new token values (e.g. a projection of these tokens)."""
        return region_tokens(data, self.height, self.width, self.regions_per_side)


def region_tokens(data: Tensor, height: int, width: int, regions_per_side: int) -> RegionTokens:
    try:
        return RegionTokens(data=data, height=height, width=width, regions_per_side=regions_per_side)
    except ValidationError as e:
        raise ShapeError(str(e)) from e


def _axes(height: int, width: int, s: int) -> dict[str, int]:
    return {"sy": s, "sx": s, "h": height // s, "w": width // s}


def region_partition(f: Tensor, regions_per_side: int) -> RegionTokens:
    if f.rank != 3:
        raise ShapeError(f"region_partition: expected a [C, H, W] feature map, got dims {f.dims}")
    _, height, width = f.shape
    s = regions_per_side
    if s < 1 or height % s or width % s:
        raise PartitionError(f"cannot partition H={height}, W={width} into S={s} regions per side")
    data = rearrange(f, PARTITION_PATTERN, **_axes(height, width, s))
    return region_tokens(data, height, width, s)


def region_merge(rt: RegionTokens) -> Tensor:
    s = rt.regions_per_side
    expected = [s * s, (rt.height // s) * (rt.width // s)]
    if rt.data.dims[:2] != expected:
        raise ShapeError(f"region_merge: token dims {rt.data.dims} inconsistent with retained {expected}")
    return rearrange(rt.data, MERGE_PATTERN, **_axes(rt.height, rt.width, s))
