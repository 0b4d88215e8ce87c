from control.module import (
    ControlProblem,
    PolicyField,
    HjbResult,
    ClosedLoopResult,
    AuditResult,
    coercivity,
    radius_for,
    search_radius,
    hamiltonian,
    gamma0,
    cutoff,
    truncate_hamiltonian,
    quadratic_hamiltonian,
    hjb_coefficients,
    solve_hjb,
    solve_hjb_adaptive,
    running_costs,
    cost,
    closed_loop,
    fundamental_relation_audit,
    gamma0_discontinuity,
)
