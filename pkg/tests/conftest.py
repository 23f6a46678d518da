from pathlib import Path

from pytest import fixture

from cafbifpn.io import RunConfig, gen_fixture
from cafbifpn.pyramid import PipelineParams, init_pipeline_params
from cafbifpn.tensor import SplitMix64, Tensor

DESK_LEVELS = (2, 3, 4, 5)


def desk_pyramid(seed: int, channels: int = 6, extent: int = 16) -> dict[int, Tensor]:
    """Random [channels, extent / 2^(l-2), ...] maps for levels 2..5, values in (-1, 1)."""
    rng = SplitMix64(seed)
    maps = {}
    for level in DESK_LEVELS:
        side = extent >> (level - 2)
        maps[level] = rng.uniform_tensor([channels, side, side], -1.0, 1.0)
    return maps


@fixture(scope="session")
def desk_config() -> RunConfig:
    return RunConfig(fusion_width=6, regions_s=2, topk_k=2, lce_kernel=3, seed=11)


@fixture(scope="session")
def desk_backbone() -> dict[int, Tensor]:
    return desk_pyramid(seed=3, channels=4)


@fixture(scope="session")
def desk_inputs() -> dict[int, Tensor]:
    return desk_pyramid(seed=5, channels=6)


@fixture(scope="session")
def desk_params(desk_config: RunConfig) -> PipelineParams:
    config = desk_config.model_copy(update={"zero_offsets": False})
    return init_pipeline_params(config, {level: 4 for level in DESK_LEVELS})


@fixture(scope="session")
def fixture_dir(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("fixture")
    gen_fixture(7, out)
    return out
