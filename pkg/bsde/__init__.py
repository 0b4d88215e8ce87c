from bsde.regression import (
    Feature,
    RegressionBasis,
    RegressionFit,
    regress,
    fit_basis,
    present_features,
    lag_features,
    running_average_features,
)
from bsde.module import (
    BsdeSolution,
    DerivativeSolution,
    StepFits,
    solve_bsde,
    solve_first_derivative_bsde,
    export_solution,
    EXPLICIT,
    PICARD,
)
from bsde.linear import LinearBsdeSpec, linear_bsde_closed_form
