"""
Convolutional feature enhancement.

Three parallel branches (1x1 reduction, a pair of asymmetric convolutions, then a dilated or deformable
3x3) are concatenated along channels and added to a 1x1 projection of the input.
"""
from typing import Callable, Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, PositiveInt, ValidationError, model_validator

from cafbifpn.conv import Conv2dParams, DeformableParams, conv2d, deformable_conv2d
from cafbifpn.errors import ConfigError, ShapeError
from cafbifpn.tensor import Tensor, add, concat_axis, relu
from cafbifpn.tensor.tree import map_tensors

Activation = Literal["none", "relu"]

# (first, second) asymmetric kernel shapes and the context convolution per branch
BRANCH_LAYOUT = {
    "branch1": ((1, 3), (3, 1), "dilated"),
    "branch2": ((1, 5), (5, 1), "dilated"),
    "branch3": ((3, 1), (1, 3), "deformable"),
}


class CfeBranch(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    reduce: Conv2dParams
    first: Conv2dParams
    second: Conv2dParams
    context: Union[Conv2dParams, DeformableParams]

    @property
    def width(self) -> int:
        return self.reduce.out_channels

    def convolutions(self) -> list[Conv2dParams]:
        context = self.context.base if isinstance(self.context, DeformableParams) else self.context
        return [self.reduce, self.first, self.second, context]


class CfeParams(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    branch1: CfeBranch
    branch2: CfeBranch
    branch3: CfeBranch
    residual: Conv2dParams
    fusion_width: PositiveInt
    activation: Activation = "relu"

    @model_validator(mode="after")
    def check_channel_plan(self) -> "CfeParams":
        if self.fusion_width % 3:
            raise ValueError(f"fusion_width % 3 violated: W_f={self.fusion_width}")
        width = self.fusion_width // 3
        if self.residual.kernel_size != (1, 1) or self.residual.out_channels != self.fusion_width:
            raise ValueError(f"residual must be a 1x1 convolution onto {self.fusion_width} channels")
        for name, (first, second, context) in BRANCH_LAYOUT.items():
            branch: CfeBranch = getattr(self, name)
            if branch.reduce.kernel_size != (1, 1) or branch.reduce.in_channels != self.residual.in_channels:
                raise ValueError(f"{name}: reduction must be 1x1 from {self.residual.in_channels} channels")
            if branch.first.kernel_size != first or branch.second.kernel_size != second:
                raise ValueError(f"{name}: expected {first} then {second} kernels")
            if (context == "deformable") != isinstance(branch.context, DeformableParams):
                raise ValueError(f"{name}: context convolution must be {context}")
            for conv in branch.convolutions():
                if conv.out_channels != width or (conv is not branch.reduce and conv.in_channels != width):
                    raise ValueError(f"{name}: every branch convolution must keep W_f/3={width} channels")
        return self

    @property
    def in_channels(self) -> int:
        return self.residual.in_channels


def cfe_params(
    branch1: CfeBranch,
    branch2: CfeBranch,
    branch3: CfeBranch,
    residual: Conv2dParams,
    fusion_width: int,
    activation: Activation = "relu",
) -> CfeParams:
    if fusion_width % 3:
        raise ConfigError(f"fusion_width % 3 violated: W_f={fusion_width}")
    try:
        return CfeParams(
            branch1=branch1,
            branch2=branch2,
            branch3=branch3,
            residual=residual,
            fusion_width=fusion_width,
            activation=activation,
        )
    except ValidationError as e:
        raise ShapeError(str(e)) from e


def _activate(t: Tensor, activation: Activation) -> Tensor:
    return relu(t) if activation == "relu" else t


def cfe_branch_forward(f: Tensor, branch: CfeBranch, activation: Activation = "relu") -> Tensor:
    x = _activate(conv2d(f, branch.reduce), activation)
    x = _activate(conv2d(x, branch.first), activation)
    x = _activate(conv2d(x, branch.second), activation)
    if isinstance(branch.context, DeformableParams):
        return _activate(deformable_conv2d(x, branch.context), activation)
    return _activate(conv2d(x, branch.context), activation)


def cfe_forward(f: Tensor, p: CfeParams) -> Tensor:
    if p.fusion_width % 3:
        raise ConfigError(f"fusion_width % 3 violated: W_f={p.fusion_width}")
    if f.rank != 3 or f.shape[0] != p.in_channels:
        raise ShapeError(f"cfe_forward: input dims {f.dims} do not match {p.in_channels} input channels")
    branches = [cfe_branch_forward(f, branch, p.activation) for branch in (p.branch1, p.branch2, p.branch3)]
    return add(concat_axis(branches, 0), conv2d(f, p.residual))


def impulse_support_radius(forward: Callable[[Tensor], Tensor], in_channels: int, bound: int) -> int:
    """Chebyshev radius of the output change caused by a unit impulse at the centre of a (2*bound+1)^2 map.

    Pixels outside the impulse's reach see identical inputs, so their outputs match bit for bit.
    """
    size = 2 * bound + 1
    zero = np.zeros((in_channels, size, size))
    impulse = zero.copy()
    impulse[:, bound, bound] = 1.0
    response = forward(Tensor.wrap(impulse)).data - forward(Tensor.wrap(zero)).data
    changed = np.argwhere(np.any(response != 0, axis=0))
    if len(changed) == 0:
        return 0
    return int(np.abs(changed - bound).max())


def _nominal_radius(p: CfeParams) -> int:
    radius = 0
    for name in BRANCH_LAYOUT:
        branch_radius = 0
        for conv in getattr(p, name).convolutions():
            kh, kw = conv.kernel_size
            branch_radius += conv.dilation * (max(kh, kw) - 1) // 2
        radius = max(radius, branch_radius)
    return radius


def cfe_receptive_probe(p: CfeParams) -> int:
    """Measured support radius of the CFE impulse response, with offsets zeroed and no activation."""

    def zero_offsets(name: str, tensor: Tensor) -> Tensor:
        return Tensor.zeros(tensor.dims, tensor.dtype) if ".offset_predictor." in f".{name}" else tensor

    probe = map_tensors(p, zero_offsets).model_copy(update={"activation": "none"})
    return impulse_support_radius(lambda x: cfe_forward(x, probe), p.in_channels, _nominal_radius(p) + 2)
