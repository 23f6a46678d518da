from typing import Union

from pydantic import (
    BaseModel,
    ConfigDict,
    NonNegativeInt,
    PositiveInt,
    ValidationError,
    field_validator,
    model_validator,
)

from cafbifpn.errors import ShapeError
from cafbifpn.tensor import Tensor

PaddingType = tuple[NonNegativeInt, NonNegativeInt]


class Conv2dParams(BaseModel):
    """Weights [C_out, C_in, k_h, k_w], bias [C_out], and zero-fill geometry (padding is (pad_h, pad_w))."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    weights: Tensor
    bias: Tensor
    stride: PositiveInt = 1
    padding: PaddingType = (0, 0)
    dilation: PositiveInt = 1

    @field_validator("padding", mode="before")
    @classmethod
    def expand_padding(cls, padding: Union[int, PaddingType]) -> PaddingType:
        if isinstance(padding, int):
            return (padding, padding)
        return padding

    @model_validator(mode="after")
    def check_shapes(self) -> "Conv2dParams":
        if self.weights.rank != 4:
            raise ValueError(f"conv weights must be [C_out, C_in, k_h, k_w], got {self.weights.dims}")
        if self.bias.dims != [self.weights.dims[0]]:
            raise ValueError(f"conv bias dims {self.bias.dims} do not match C_out={self.weights.dims[0]}")
        return self

    @property
    def out_channels(self) -> int:
        return self.weights.dims[0]

    @property
    def in_channels(self) -> int:
        return self.weights.dims[1]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weights.dims[2], self.weights.dims[3]

    def output_extent(self, height: int, width: int) -> tuple[int, int]:
        kh, kw = self.kernel_size
        ph, pw = self.padding
        out_h = (height + 2 * ph - self.dilation * (kh - 1) - 1) // self.stride + 1
        out_w = (width + 2 * pw - self.dilation * (kw - 1) - 1) // self.stride + 1
        return out_h, out_w


def same_padding(kernel_h: int, kernel_w: int, dilation: int = 1) -> PaddingType:
    """Padding that preserves spatial extents at stride 1 for odd kernels."""
    return (dilation * (kernel_h - 1) // 2, dilation * (kernel_w - 1) // 2)


def conv_params(
    weights: Tensor,
    bias: Tensor,
    stride: int = 1,
    padding: Union[int, PaddingType, None] = None,
    dilation: int = 1,
) -> Conv2dParams:
    """Build Conv2dParams, defaulting to extent-preserving padding."""
    if padding is None:
        if weights.rank != 4:
            raise ShapeError(f"conv weights must be [C_out, C_in, k_h, k_w], got {weights.dims}")
        padding = same_padding(weights.dims[2], weights.dims[3], dilation)
    try:
        return Conv2dParams(weights=weights, bias=bias, stride=stride, padding=padding, dilation=dilation)
    except ValidationError as e:
        raise ShapeError(str(e)) from e


class DeformableParams(BaseModel):
    """3x3 base convolution plus the 3x3 convolution predicting its 2*k_h*k_w sampling offsets."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    base: Conv2dParams
    offset_predictor: Conv2dParams

    @model_validator(mode="after")
    def check_offsets(self) -> "DeformableParams":
        kh, kw = self.base.kernel_size
        if self.offset_predictor.out_channels != 2 * kh * kw:
            raise ValueError(
                f"offset predictor emits {self.offset_predictor.out_channels} channels, expected {2 * kh * kw}"
            )
        if self.offset_predictor.in_channels != self.base.in_channels:
            raise ValueError("offset predictor and base convolution read different channel counts")
        return self


def deformable_params(base: Conv2dParams, offset_predictor: Conv2dParams) -> DeformableParams:
    try:
        return DeformableParams(base=base, offset_predictor=offset_predictor)
    except ValidationError as e:
        raise ShapeError(str(e)) from e
