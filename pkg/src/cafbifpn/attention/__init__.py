from cafbifpn.attention.counters import STAGES, MacCounter
from cafbifpn.attention.regions import RegionTokens, region_merge, region_partition, region_tokens
from cafbifpn.attention.routing import (
    BaResult,
    BraParams,
    RoutingResult,
    attention_weights,
    ba_forward,
    ba_forward_traced,
    bra_params,
    gather_kv,
    gather_regions,
    lce,
    qkv_project,
    region_pool,
    token_attention,
    topk_routing,
)
