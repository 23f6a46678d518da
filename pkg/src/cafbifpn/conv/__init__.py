from cafbifpn.conv.params import (
    Conv2dParams,
    DeformableParams,
    conv_params,
    deformable_params,
    same_padding,
)
from cafbifpn.conv.conv2d import conv2d, depthwise_conv2d
from cafbifpn.conv.deformable import bilinear_sample, deformable_conv2d, deformable_conv2d_with_offsets
