from cafbifpn.tensor.core import DTYPES, GradientMap, Node, Tape, Tensor, backward, record_op
from cafbifpn.tensor.ops import (
    add,
    add_n,
    concat_axis,
    elementwise,
    matmul,
    mul,
    permute,
    rearrange,
    reduce_mean_axis,
    relu,
    reshape,
    scale,
    slice_axis,
    softmax_lastdim,
    structural,
    sub,
    sum_all,
    transpose,
)
from cafbifpn.tensor.rng import RngState, SplitMix64, rng_next, rng_next_raw
from cafbifpn.tensor.tree import map_tensors, named_tensors, watch_tensors
