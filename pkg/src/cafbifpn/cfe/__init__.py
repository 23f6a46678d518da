from cafbifpn.cfe.block import (
    BRANCH_LAYOUT,
    Activation,
    CfeBranch,
    CfeParams,
    cfe_branch_forward,
    cfe_forward,
    cfe_params,
    cfe_receptive_probe,
    impulse_support_radius,
)
