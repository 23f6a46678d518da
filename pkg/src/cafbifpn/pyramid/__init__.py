from cafbifpn.pyramid.fusion import FusionWeights, fuse, resize
from cafbifpn.pyramid.afbifpn import (
    LEVELS,
    REFINED_LEVELS,
    PipelineParams,
    PipelineTrace,
    PyramidLevels,
    afbifpn_forward,
    c_afbifpn_forward,
    enhance,
)
from cafbifpn.pyramid.init import ParamInitializer, init_pipeline_params
