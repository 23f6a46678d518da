"""
Bi-level routing attention.

Tokens are grouped into S x S regions. Region-level queries and keys (token means) select, for every
region, the k most affine regions; each query token then attends only to the tokens of its routed
regions. A depthwise convolution over the values adds local context.
"""
import math
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, PositiveInt, ValidationError, model_validator

from cafbifpn.attention.counters import MacCounter, counted_matmul
from cafbifpn.attention.regions import RegionTokens, region_merge, region_partition
from cafbifpn.conv import depthwise_conv2d
from cafbifpn.errors import ConfigError, ShapeError
from cafbifpn.tensor import (
    Tensor,
    add,
    concat_axis,
    record_op,
    reduce_mean_axis,
    reshape,
    scale,
    slice_axis,
    softmax_lastdim,
    transpose,
)

TieBreak = Literal["ascending", "descending"]


class BraParams(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    lce_kernel: Tensor
    regions_per_side: PositiveInt
    topk: PositiveInt
    heads: PositiveInt = 1

    @model_validator(mode="after")
    def check_params(self) -> "BraParams":
        channels = self.channels
        for name in ("w_q", "w_k", "w_v"):
            if getattr(self, name).dims != [channels, channels]:
                raise ValueError(f"{name} dims {getattr(self, name).dims} must be [{channels}, {channels}]")
        kernel = self.lce_kernel.dims
        if len(kernel) != 3 or kernel[0] != channels or kernel[1] != kernel[2] or kernel[1] % 2 == 0:
            raise ValueError(f"lce_kernel dims {kernel} must be [{channels}, k, k] with k odd")
        if self.topk > self.regions_per_side**2:
            raise ValueError(f"topk_k <= S^2 violated: k={self.topk}, S={self.regions_per_side}")
        if channels % self.heads:
            raise ValueError(f"heads={self.heads} must divide C={channels}")
        return self

    @property
    def channels(self) -> int:
        return self.w_q.dims[0]


def bra_params(
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    lce_kernel: Tensor,
    regions_per_side: int,
    topk: int,
    heads: int = 1,
) -> BraParams:
    try:
        return BraParams(
            w_q=w_q,
            w_k=w_k,
            w_v=w_v,
            lce_kernel=lce_kernel,
            regions_per_side=regions_per_side,
            topk=topk,
            heads=heads,
        )
    except ValidationError as e:
        raise ConfigError(str(e)) from e


class RoutingResult(BaseModel):
    """Region affinity [S^2, S^2] and the routed region ids [S^2, k], best first."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    affinity: Tensor
    indices: np.ndarray

    @property
    def topk(self) -> int:
        return self.indices.shape[1]


class BaResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    output: Tensor
    routing: RoutingResult


def _project(tokens: RegionTokens, weights: Tensor, counter: Optional[MacCounter]) -> RegionTokens:
    regions, count, channels = tokens.data.shape
    flat = reshape(tokens.data, [regions * count, channels])
    projected = counted_matmul(flat, weights, counter, "projection")
    return tokens.with_data(reshape(projected, [regions, count, weights.dims[1]]))


def qkv_project(
    rt: RegionTokens, p: BraParams, counter: Optional[MacCounter] = None
) -> tuple[RegionTokens, RegionTokens, RegionTokens]:
    if rt.channels != p.channels:
        raise ShapeError(f"qkv_project: tokens have {rt.channels} channels, projections expect {p.channels}")
    return _project(rt, p.w_q, counter), _project(rt, p.w_k, counter), _project(rt, p.w_v, counter)


def region_pool(t: RegionTokens, counter: Optional[MacCounter] = None) -> Tensor:
    """Mean token of every region, [S^2, C]."""
    if counter is not None:
        counter.add("routing", t.data.size)
    return reduce_mean_axis(t.data, 1)


def topk_routing(
    q_rm: Tensor,
    k_rm: Tensor,
    k: int,
    tie_break: TieBreak = "ascending",
    counter: Optional[MacCounter] = None,
) -> RoutingResult:
    """Keep, per region, the k regions of highest affinity; equal affinities prefer the lower region id.

    The selection is not differentiated; gradients reach q_rm and k_rm only through `affinity`.
    """
    regions = q_rm.shape[0]
    if not 1 <= k <= regions:
        raise ConfigError(f"topk_k <= S^2 violated: k={k} with {regions} regions")
    affinity = counted_matmul(q_rm, transpose(k_rm), counter, "routing")
    values = affinity.data
    if tie_break == "ascending":
        order = np.argsort(-values, axis=1, kind="stable")
    else:
        order = regions - 1 - np.argsort(-values[:, ::-1], axis=1, kind="stable")
    indices = order[:, :k].copy()
    indices.flags.writeable = False

    if affinity.tape is not None:
        rows = np.arange(regions)
        if k < regions:
            margin = float((values[rows, order[:, k - 1]] - values[rows, order[:, k]]).min())
        else:
            margin = math.inf
        affinity.tape.annotate("routing", margin)
    return RoutingResult(affinity=affinity, indices=indices)


def gather_regions(t: Tensor, indices: np.ndarray) -> Tensor:
    """out[r] = concat(t[indices[r, 0]], ..., t[indices[r, k-1]]) along the token axis."""
    regions, count, channels = t.shape
    if indices.ndim != 2 or indices.shape[0] != regions:
        raise ShapeError(f"gather: index matrix {list(indices.shape)} does not match {regions} regions")
    if indices.min() < 0 or indices.max() >= regions:
        raise IndexError(f"gather: region ids must lie in [0, {regions}), got [{indices.min()}, {indices.max()}]")
    k = indices.shape[1]
    value = t.data[indices].reshape(regions, k * count, channels)

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros(t.shape, dtype=g.dtype)
        np.add.at(grad, indices, g.reshape(regions, k, count, channels))
        return (grad,)

    return record_op("gather", [t], value, vjp)


def gather_kv(
    K_r: RegionTokens, V_r: RegionTokens, idx: RoutingResult, counter: Optional[MacCounter] = None
) -> tuple[Tensor, Tensor]:
    K_g = gather_regions(K_r.data, idx.indices)
    V_g = gather_regions(V_r.data, idx.indices)
    if counter is not None:
        counter.add("gather", K_g.size + V_g.size)
    return K_g, V_g


def _region_slice(t: Tensor, region: int) -> Tensor:
    _, count, channels = t.shape
    return reshape(slice_axis(t, 0, region, region + 1), [count, channels])


def _head_slice(t: Tensor, head: int, width: int, heads: int) -> Tensor:
    if heads == 1:
        return t
    return slice_axis(t, 1, head * width, (head + 1) * width)


def _region_heads(
    q: Tensor, k_g: Tensor, v_g: Tensor, heads: int, counter: Optional[MacCounter]
) -> list[tuple[Tensor, Tensor]]:
    """(attention weights, attended values) for every head of one region."""
    width = q.shape[1] // heads
    results = []
    for head in range(heads):
        q_h = _head_slice(q, head, width, heads)
        k_h = _head_slice(k_g, head, width, heads)
        v_h = _head_slice(v_g, head, width, heads)
        logits = scale(counted_matmul(q_h, transpose(k_h), counter, "qk_logits"), 1.0 / math.sqrt(width))
        alpha = softmax_lastdim(logits)
        results.append((alpha, counted_matmul(alpha, v_h, counter, "av_aggregation")))
    return results


def _check_heads(channels: int, heads: int) -> None:
    if heads < 1 or channels % heads:
        raise ConfigError(f"heads={heads} must divide C={channels}")


def token_attention(
    Q_r: RegionTokens, K_g: Tensor, V_g: Tensor, heads: int, counter: Optional[MacCounter] = None
) -> RegionTokens:
    """Per region and head: softmax(q K_g^T / sqrt(d_k)) V_g, heads concatenated along channels."""
    _check_heads(Q_r.channels, heads)
    outputs = []
    for region in range(Q_r.region_count):
        per_head = _region_heads(
            _region_slice(Q_r.data, region),
            _region_slice(K_g, region),
            _region_slice(V_g, region),
            heads,
            counter,
        )
        attended = concat_axis([out for _, out in per_head], 1) if heads > 1 else per_head[0][1]
        outputs.append(reshape(attended, [1] + attended.dims))
    return Q_r.with_data(concat_axis(outputs, 0) if len(outputs) > 1 else outputs[0])


def attention_weights(Q_r: RegionTokens, K_g: Tensor, heads: int) -> np.ndarray:
    """The softmax weights token_attention uses, [S^2, heads, n, k*n]."""
    _check_heads(Q_r.channels, heads)
    weights = []
    for region in range(Q_r.region_count):
        per_head = _region_heads(
            _region_slice(Q_r.data, region), _region_slice(K_g, region), _region_slice(K_g, region), heads, None
        )
        weights.append(np.stack([alpha.data for alpha, _ in per_head]))
    return np.stack(weights)


def lce(V_r: RegionTokens, kernel: Tensor, counter: Optional[MacCounter] = None) -> Tensor:
    """Local context: depthwise convolution of the re-spatialised values."""
    if kernel.rank != 3 or kernel.dims[0] != V_r.channels or kernel.dims[1] != kernel.dims[2]:
        raise ShapeError(f"lce: kernel dims {kernel.dims} must be [{V_r.channels}, k, k]")
    values = region_merge(V_r)
    if counter is not None:
        counter.add("lce", values.size * kernel.dims[1] * kernel.dims[2])
    return depthwise_conv2d(values, kernel)


def ba_forward_traced(
    f: Tensor,
    p: BraParams,
    counter: Optional[MacCounter] = None,
    routing: Optional[RoutingResult] = None,
) -> BaResult:
    """BA(F) together with the routing it used. A given `routing` is reused instead of recomputed."""
    tokens = region_partition(f, p.regions_per_side)
    queries, keys, values = qkv_project(tokens, p, counter)
    if routing is None:
        # region means are charged as a single HW*C pooling pass
        if counter is not None:
            counter.add("routing", tokens.data.size)
        routing = topk_routing(region_pool(queries), region_pool(keys), p.topk, counter=counter)
    elif list(routing.indices.shape) != [tokens.region_count, p.topk]:
        raise ShapeError(f"frozen routing {list(routing.indices.shape)} does not fit {tokens.region_count} regions")
    K_g, V_g = gather_kv(keys, values, routing, counter)
    attended = token_attention(queries, K_g, V_g, p.heads, counter)
    output = add(region_merge(attended), lce(values, p.lce_kernel, counter))
    return BaResult(output=output, routing=routing)


def ba_forward(
    f: Tensor,
    p: BraParams,
    counter: Optional[MacCounter] = None,
    routing: Optional[RoutingResult] = None,
) -> Tensor:
    return ba_forward_traced(f, p, counter, routing).output
