from forward.noise import NoiseSpec, brownian_increment, increments
from forward.coefficients import CoefficientSet, check_coefficients
from forward.module import (
    Trajectories,
    ForwardEnsemble,
    simulate_forward,
    simulate_unlifted,
    lift_path,
    variational_flow,
    method_of_steps,
    moment_statistic,
    noise_term,
    euler_update,
    export_csv,
    write_snapshot,
    read_snapshot,
)
