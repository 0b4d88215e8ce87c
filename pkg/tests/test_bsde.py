import json

import numpy as np
import pandas as pd
import pytest

from bsde import (
    EXPLICIT, PICARD, LinearBsdeSpec, RegressionBasis, export_solution, linear_bsde_closed_form,
    solve_bsde, solve_first_derivative_bsde,
)
from common.errors import RegressionFailure, UnboundedCoefficient
from forward import CoefficientSet, NoiseSpec, increments, simulate_forward, variational_flow
from segment import PathGrid, constant_state, present_direction
from tests.conftest import noise, within


def exponential(rate: float) -> CoefficientSet:
    return CoefficientSet(
        sigma=[[1.0]], terminal=lambda x: np.ones(x.batch_shape), driver=lambda s, x, y, z: -rate * y,
        lipschitz_C=rate, name="exponential",
    )


def martingale() -> CoefficientSet:
    return CoefficientSet(sigma=[[1.0]], terminal=lambda x: x.present[..., 0], z_bound_K=1.0, name="martingale")


def test_heat_value(grid, heat):
    coeffs, x0 = heat
    solution = solve_bsde(simulate_forward(coeffs, 0.0, x0, noise(grid, 4000)))
    assert within(solution.y0, 1.25, solution.std_error)
    assert solution.scheme == EXPLICIT
    assert solution.Y.shape == (4000, 21) and solution.Z.shape == (4000, 20, 1)


def test_exponential_driver():
    grid = PathGrid(1.0, 50)
    ensemble = simulate_forward(exponential(0.5), 0.0, constant_state(grid, 0.0), noise(grid, 1000))
    solution = solve_bsde(ensemble)
    # (1 + rate dt)^N against exp(rate T)
    assert solution.y0 == pytest.approx((1 + 0.5 * grid.dt) ** 50, rel=1e-6)
    assert solution.y0 == pytest.approx(np.exp(0.5), rel=0.01)


def test_picard_scheme():
    grid = PathGrid(1.0, 50)
    ensemble = simulate_forward(exponential(0.5), 0.0, constant_state(grid, 0.0), noise(grid, 1000))
    solution = solve_bsde(ensemble, scheme=PICARD, picard_iterations=3)
    assert solution.scheme == PICARD and solution.picard_iterations == 3
    assert solution.y0 == pytest.approx(np.exp(0.5), rel=0.01)
    with pytest.raises(ValueError):
        solve_bsde(ensemble, scheme="implicit")


def test_martingale_z(grid):
    coeffs = martingale()
    solution = solve_bsde(
        simulate_forward(coeffs, 0.0, constant_state(grid, 0.5), noise(grid, 4000)),
        basis=RegressionBasis.present_only(1),
    )
    assert solution.z0[0] == pytest.approx(1.0, abs=0.1)
    bound = solution.check_z_bound()
    assert bound["bound"] == pytest.approx(1.0)
    assert bound["max_abs_z"] == solution.max_abs_z < 1.5


def test_z_bound_needs_declared_K(grid):
    coeffs = CoefficientSet(sigma=[[1.0]], terminal=lambda x: x.present[..., 0])
    ensemble = simulate_forward(coeffs, 0.0, constant_state(grid, 0.0), noise(grid, 200))
    assert solve_bsde(ensemble, basis=RegressionBasis.present_only(1)).check_z_bound() is None


def test_pathwise_estimator(grid, heat):
    coeffs, x0 = heat
    solution = solve_bsde(simulate_forward(coeffs, 0.0, x0, noise(grid, 500)))
    phi = coeffs.Phi(solution.ensemble.terminal_state())
    np.testing.assert_allclose(solution.pathwise, phi)
    assert solution.std_error > 0
    np.testing.assert_array_equal(solution.driver_values, 0.0)


def test_regression_failure(grid, heat):
    coeffs, x0 = heat
    with pytest.raises(RegressionFailure) as info:
        solve_bsde(simulate_forward(coeffs, 0.0, x0, noise(grid, 50)))
    assert info.value.step == 19


def test_predict_matches_solve(grid, heat):
    coeffs, x0 = heat
    solution = solve_bsde(simulate_forward(coeffs, 0.0, x0, noise(grid, 1000)))
    k = 7
    state = solution.ensemble.state(k)
    np.testing.assert_allclose(solution.predict_y(k, state), solution.Y[:, k], atol=1e-10)
    np.testing.assert_allclose(solution.predict_y(20, state), coeffs.Phi(state))


def test_first_derivative(grid, heat):
    coeffs, x0 = heat
    ensemble = simulate_forward(coeffs, 0.0, x0, noise(grid, 4000))
    base = solve_bsde(ensemble)
    flow = variational_flow(coeffs, ensemble, present_direction(grid, [1.0]))
    derivative = solve_first_derivative_bsde(ensemble, coeffs, flow, base)
    assert within(derivative.value, 1.0, derivative.std_error)


def test_export(grid, heat, tmp_path):
    coeffs, x0 = heat
    solution = solve_bsde(simulate_forward(coeffs, 0.0, x0, noise(grid, 200)), basis=RegressionBasis.present_only(1))
    export_solution(solution, str(tmp_path / "solution.csv"), str(tmp_path / "regression.json"))
    frame = pd.read_csv(tmp_path / "solution.csv")
    assert list(frame.columns) == ["path", "step", "time", "Y", "Z0"]
    assert len(frame) == 200 * 21
    assert frame[frame["step"] == 20]["Z0"].isna().all()
    with open(tmp_path / "regression.json") as f:
        diagnostics = json.load(f)
    assert len(diagnostics["steps"]) == 20
    assert diagnostics["basis"]["features"] == ["present_0"]


def test_linear_deterministic_oracle():
    grid = PathGrid(1.0, 50)
    a, c = 0.3, 0.1
    spec = LinearBsdeSpec.constant(a, [0.2], c, 1.0, 10, 50)
    Y = linear_bsde_closed_form(spec, NoiseSpec(0, 10, 1, grid))
    dt = grid.dt
    expected = np.exp(a) + c * dt * np.sum(np.exp(a * dt * np.arange(50)))
    assert Y[0, 0] == pytest.approx(expected, rel=1e-12)
    assert Y[0, 0] == pytest.approx(np.exp(a) + c * (np.exp(a) - 1) / a, rel=0.01)


def test_linear_oracle_matches_regression_solver():
    grid = PathGrid(1.0, 50)
    spec = LinearBsdeSpec.constant(0.3, [0.2], 0.1, 1.0, 2000, 50)
    coeffs = CoefficientSet(
        sigma=[[1.0]], terminal=lambda x: np.ones(x.batch_shape), driver=spec.driver(), lipschitz_C=0.3,
    )
    spec_noise = noise(grid, 2000)
    solution = solve_bsde(simulate_forward(coeffs, 0.0, constant_state(grid, 0.0), spec_noise))
    oracle = linear_bsde_closed_form(spec, spec_noise)[0, 0]
    assert abs(solution.y0 - oracle) <= max(3 * solution.std_error, 0.25 * grid.dt * abs(oracle))


def test_linear_stochastic_terminal():
    grid = PathGrid(1.0, 10)
    spec_noise = NoiseSpec(8, 3000, 1, grid)
    W_T = increments(spec_noise).sum(axis=1)[:, 0]
    spec = LinearBsdeSpec(
        a=np.zeros((3000, 10)), b=np.zeros((3000, 10)), c=np.zeros((3000, 10)), eta=1.0 + W_T,
    )
    Y = linear_bsde_closed_form(spec, spec_noise)
    assert Y[0, 0] == pytest.approx(1.0 + W_T.mean())
    se = W_T.std(ddof=1) / np.sqrt(3000)
    assert within(Y[0, 0], 1.0, se)


def test_linear_bounds_and_shapes():
    grid = PathGrid(1.0, 10)
    spec = LinearBsdeSpec.constant(2.0, [0.0], 0.0, 1.0, 5, 10, a_bound=1.0)
    with pytest.raises(UnboundedCoefficient):
        linear_bsde_closed_form(spec, NoiseSpec(0, 5, 1, grid))
    with pytest.raises(ValueError):
        LinearBsdeSpec(a=np.zeros((5, 10)), b=np.zeros((5, 9)), c=np.zeros((5, 10)), eta=np.zeros(5))
    with pytest.raises(ValueError):
        linear_bsde_closed_form(LinearBsdeSpec.constant(0.1, [0.0], 0.0, 1.0, 5, 8), NoiseSpec(0, 5, 1, grid))


def test_linear_weights():
    spec = LinearBsdeSpec.constant(-0.5, [1.0], 0.0, 1.0, 3, 4)
    V = spec.weight_V(0.25)
    np.testing.assert_allclose(V[0], [0.0, 0.375, 0.75, 1.125, 1.5])
    gamma = spec.gamma(np.zeros((3, 4, 1)), 0.25)
    np.testing.assert_allclose(gamma[0, -1], np.exp(-1.0))
    driver = spec.driver()
    assert driver(0.0, None, np.array([2.0]), np.array([[3.0]]))[0] == pytest.approx(-(-1.0 + 3.0))
