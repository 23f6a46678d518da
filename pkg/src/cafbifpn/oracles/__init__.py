"""Slow, loop-based references used to check the vectorised kernels. Desk scale only (extents <= 32)."""
from cafbifpn.oracles.conv import (
    bilinear_reference,
    conv2d_reference,
    deformable_conv2d_reference,
    depthwise_conv2d_reference,
)
from cafbifpn.oracles.attention import dense_attention_reference, routed_attention_reference, topk_reference
from cafbifpn.oracles.gradients import finite_diff_grad
from cafbifpn.oracles.flops import FlopCount, attention_flops
from cafbifpn.oracles.bifpn import (
    afbifpn_reference,
    c_afbifpn_reference,
    cfe_reference,
    down2_reference,
    fuse_reference,
    plain_bifpn_reference,
    up2_reference,
)
