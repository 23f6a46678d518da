from tabulate import tabulate

from cafbifpn.oracles import attention_flops

# (H, W, C, S, k)
cases = [
    (16, 16, 48, 2, 1),
    (16, 16, 48, 2, 2),
    (16, 16, 48, 4, 2),
    (32, 32, 48, 4, 2),
    (32, 32, 48, 4, 4),
    (64, 64, 48, 8, 4),
    (64, 64, 48, 8, 64),
]


def get_sparsity_table() -> str:
    """Dense versus routed multiply-accumulate counts; the qk and av ratio is k / S^2."""
    results = [["H x W", "S", "k", "Dense qk MACs", "Routed qk MACs", "Routing MACs", "qk ratio", "Total ratio"]]
    for H, W, C, S, k in cases:
        dense = attention_flops(H, W, C, S, k, mode="dense", lce_kernel=5)
        routed = attention_flops(H, W, C, S, k, mode="routed", lce_kernel=5)
        results.append(
            [
                f"{H} x {W}",
                S,
                k,
                dense.qk_logits,
                routed.qk_logits,
                routed.routing,
                str(routed.ratio(dense, "qk_logits")),
                round(routed.total_macs / dense.total_macs, 4),
            ]
        )

    return tabulate(results, headers="firstrow", tablefmt="pretty")


if __name__ == "__main__":
    table = get_sparsity_table()
    print(table)
