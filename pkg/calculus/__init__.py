from calculus.module import (
    ValueQuery,
    ValueEstimate,
    ResidualReport,
    Term,
    ZIdentification,
    FlowGap,
    GrowthFit,
    value,
    solve_value,
    directional_derivative,
    du_sigma,
    sigma_directions,
    second_trace,
    time_derivative,
    z_identification_gap,
    pde_residual,
    flow_property_gap,
    growth_fit,
    default_eps,
    default_eps2,
)
