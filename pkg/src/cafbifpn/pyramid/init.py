"""Deterministic parameter initialisation from a RunConfig and a seed."""
import logging
from typing import Optional

from cafbifpn.attention import BraParams, bra_params
from cafbifpn.cfe import BRANCH_LAYOUT, CfeBranch, CfeParams, cfe_params
from cafbifpn.conv import Conv2dParams, DeformableParams, conv_params, deformable_params
from cafbifpn.errors import ConfigError
from cafbifpn.io.config import RunConfig
from cafbifpn.pyramid.afbifpn import LEVELS, REFINED_LEVELS, PipelineParams
from cafbifpn.pyramid.fusion import FusionWeights
from cafbifpn.tensor import SplitMix64, Tensor

KERNEL_BOUND = 0.1


class ParamInitializer:
    """Draws every kernel uniform in (-0.1, 0.1) from one SplitMix64 stream, in a fixed order."""

    def __init__(self, seed: int, dtype: str = "float64") -> None:
        self.rng = SplitMix64(seed)
        self.dtype = dtype

    def tensor(self, dims: list[int], zero: bool = False) -> Tensor:
        if zero:
            return Tensor.zeros(dims, self.dtype)
        return self.rng.uniform_tensor(dims, -KERNEL_BOUND, KERNEL_BOUND, self.dtype)

    def conv(
        self, c_out: int, c_in: int, kernel: tuple[int, int], dilation: int = 1, zero: bool = False
    ) -> Conv2dParams:
        weights = self.tensor([c_out, c_in, *kernel], zero)
        bias = self.tensor([c_out], zero)
        return conv_params(weights, bias, dilation=dilation)

    def deformable(self, channels: int, zero_offsets: bool) -> DeformableParams:
        base = self.conv(channels, channels, (3, 3))
        return deformable_params(base, self.conv(2 * 3 * 3, channels, (3, 3), zero=zero_offsets))

    def cfe(self, in_channels: int, config: RunConfig) -> CfeParams:
        width = config.fusion_width // 3
        branches = {}
        for name, (first, second, context) in BRANCH_LAYOUT.items():
            branches[name] = CfeBranch(
                reduce=self.conv(width, in_channels, (1, 1)),
                first=self.conv(width, width, first),
                second=self.conv(width, width, second),
                context=(
                    self.deformable(width, config.zero_offsets)
                    if context == "deformable"
                    else self.conv(width, width, (3, 3), dilation=config.dilation)
                ),
            )
        residual = self.conv(config.fusion_width, in_channels, (1, 1))
        return cfe_params(**branches, residual=residual, fusion_width=config.fusion_width, activation=config.activation)

    def bra(self, config: RunConfig) -> BraParams:
        channels = config.fusion_width
        return bra_params(
            w_q=self.tensor([channels, channels]),
            w_k=self.tensor([channels, channels]),
            w_v=self.tensor([channels, channels]),
            lce_kernel=self.tensor([channels, config.lce_kernel, config.lce_kernel], zero=config.zero_lce),
            regions_per_side=config.regions_s,
            topk=config.topk_k,
            heads=config.heads,
        )


def init_pipeline_params(
    config: RunConfig, backbone_channels: dict[int, int], seed: Optional[int] = None
) -> PipelineParams:
    """Parameters for a full pass; fusion weights start at 1.0. `seed` defaults to config.seed."""
    missing = [level for level in LEVELS if level not in backbone_channels]
    if missing:
        raise ConfigError(f"backbone channel counts missing for levels {missing}")
    seed = config.seed if seed is None else seed
    logging.info(f"Initialising pipeline parameters from seed {seed}...")
    init = ParamInitializer(seed, config.dtype)

    cfe, projection = None, None
    if config.cfe_enabled:
        cfe = {level: init.cfe(backbone_channels[level], config) for level in LEVELS}
    else:
        projection = {level: init.conv(config.fusion_width, backbone_channels[level], (1, 1)) for level in LEVELS}
    bra = {level: init.bra(config) for level in REFINED_LEVELS} if config.attention_fusion_enabled else None

    try:
        return PipelineParams(
            fusion=FusionWeights.constant(1.0, config.epsilon, config.dtype),
            cfe=cfe,
            projection=projection,
            bra=bra,
            cfe_enabled=config.cfe_enabled,
            attention_fusion_enabled=config.attention_fusion_enabled,
            topdown_source=config.topdown_source,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e
