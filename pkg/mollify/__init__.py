from mollify.module import (
    MollifierConfig,
    bump,
    tau_eps,
    weight_matrix,
    apply_Jn,
    smoothness_ok,
    jump_path,
    default_jump_points,
    smoothing_report,
    approximate_coefficients,
    one_jump_gap,
)
