import numpy as np
import pytest

from bench.registry import get_benchmark
from common.errors import CoefficientEvaluation, GridMismatch
from common.pool import WorkerPool
from forward import (
    CoefficientSet, NoiseSpec, check_coefficients, export_csv, lift_path, method_of_steps,
    moment_statistic, read_snapshot, simulate_forward, simulate_unlifted, variational_flow,
    write_snapshot,
)
from segment import (
    PathGrid, SampledPath, constant_state, extend, is_continuous_compatible, junction_gap, present_direction, restrict,
)
from tests.conftest import noise, within


def linear_drift(a: float, sigma: float = 0.0) -> CoefficientSet:
    return CoefficientSet(
        sigma=[[sigma]], state_drift=lambda s, x: a * x.present,
        terminal=lambda x: x.present[..., 0], name="linear-drift",
    )


def test_deterministic_euler(grid):
    ensemble = simulate_forward(linear_drift(0.7), 0.0, constant_state(grid, 2.0), noise(grid, 3))
    expected = 2.0 * (1 + 0.7 * grid.dt) ** np.arange(21)
    np.testing.assert_allclose(ensemble.presents[0, :, 0], expected, rtol=1e-12)
    assert ensemble.n_steps == 20 and ensemble.k0 == 0


def test_start_time_shortens_ensemble(grid):
    ensemble = simulate_forward(linear_drift(0.0, 1.0), 0.5, constant_state(grid, 0.0), noise(grid, 10))
    assert ensemble.n_steps == 10
    assert ensemble.k0 == 10
    assert ensemble.time(0) == pytest.approx(0.5)


def test_prefix_identity(grid):
    ensemble = simulate_forward(linear_drift(0.3, 1.0), 0.0, constant_state(grid, 1.0), noise(grid, 50))
    for k in (0, 5, 20):
        state = ensemble.state(k)
        back = extend(restrict(state, grid.time(k)), grid)
        np.testing.assert_array_equal(back.past, state.past)
        np.testing.assert_array_equal(back.present, state.present)


def test_state_past_is_shifted_history(grid):
    ensemble = simulate_forward(linear_drift(0.0, 1.0), 0.0, constant_state(grid, 0.0), noise(grid, 5))
    x3 = ensemble.state(3)
    np.testing.assert_array_equal(x3.past[:, -3:, 0], ensemble.presents[:, :3, 0])
    np.testing.assert_array_equal(x3.present[:, 0], ensemble.presents[:, 3, 0])


def test_junction_holds_previous_present(grid):
    ensemble = simulate_forward(linear_drift(0.3, 1.0), 0.0, constant_state(grid, 1.0), noise(grid, 50))
    assert is_continuous_compatible(ensemble.state(0)).all()
    for k in (1, 7, 20):
        state = ensemble.state(k)
        np.testing.assert_array_equal(state.past[:, -1], ensemble.presents[:, k - 1])
        expected = np.abs(ensemble.presents[:, k, 0] - ensemble.presents[:, k - 1, 0])
        np.testing.assert_allclose(junction_gap(state), expected, rtol=1e-15)


def test_noiseless_constant_path_stays_continuous(grid):
    ensemble = simulate_forward(linear_drift(0.0, 0.0), 0.0, constant_state(grid, 1.5), noise(grid, 4))
    for k in range(ensemble.n_steps + 1):
        assert is_continuous_compatible(ensemble.state(k)).all()


@pytest.mark.parametrize("n_steps", [16, 64])
def test_junction_gap_vanishes_with_refinement(n_steps):
    grid = PathGrid(1.0, n_steps)
    ensemble = simulate_forward(linear_drift(0.0, 1.0), 0.0, constant_state(grid, 0.0), noise(grid, 2000))
    gaps = np.concatenate([junction_gap(ensemble.state(k)) for k in range(1, n_steps + 1)])
    # E |dW| = sqrt(2 dt / pi)
    assert gaps.mean() == pytest.approx(np.sqrt(2 * grid.dt / np.pi), rel=0.05)


def test_lift_unlift_bit_equal():
    grid = PathGrid(1.0, 32)
    coeffs = get_benchmark("point-delay").coefficients(grid, {"sigma": 1.0})
    gamma = SampledPath(0.0, np.array([[1.0]]), grid)
    spec = NoiseSpec(4, 300, 1, grid)
    lifted = simulate_forward(coeffs, 0.0, lift_path(gamma), spec)
    xi = simulate_unlifted(coeffs, gamma, spec)
    np.testing.assert_array_equal(xi, lifted.presents)


def test_common_random_numbers(grid, pool):
    coeffs = linear_drift(0.2, 1.0)
    x0 = constant_state(grid, 0.0)
    a = simulate_forward(coeffs, 0.0, x0, noise(grid, 64), pool=WorkerPool(1))
    b = simulate_forward(coeffs, 0.0, x0, noise(grid, 64), pool=pool)
    np.testing.assert_array_equal(a.presents, b.presents)
    # Later start times reuse the increments of their steps.
    late = simulate_forward(coeffs.replace(state_drift=None), 0.5, x0, noise(grid, 64))
    np.testing.assert_array_equal(late.dW, a.dW[:, 10:])


def test_martingale_mean(grid):
    coeffs = linear_drift(0.0, 1.0)
    ensemble = simulate_forward(coeffs, 0.0, constant_state(grid, 0.5), noise(grid, 4000))
    terminal = ensemble.presents[:, -1, 0]
    se = terminal.std(ddof=1) / np.sqrt(len(terminal))
    assert within(terminal.mean(), 0.5, se)
    assert terminal.var(ddof=1) == pytest.approx(1.0, rel=0.1)


def test_grid_and_dimension_checks(grid):
    other = constant_state(PathGrid(1.0, 10), 0.0)
    with pytest.raises(GridMismatch):
        simulate_forward(linear_drift(0.0), 0.0, other, noise(grid, 5))
    with pytest.raises(GridMismatch):
        simulate_forward(linear_drift(0.0), 0.0, constant_state(grid, [0.0, 0.0]), noise(grid, 5))


def test_diverging_drift(grid):
    coeffs = CoefficientSet(sigma=[[0.0]], state_drift=lambda s, x: np.full(x.present.shape, np.inf), terminal=lambda x: x.present[..., 0])
    with pytest.raises(CoefficientEvaluation):
        simulate_forward(coeffs, 0.0, constant_state(grid, 0.0), noise(grid, 5))


def test_variational_flow(grid):
    coeffs = linear_drift(0.5, 1.0)
    ensemble = simulate_forward(coeffs, 0.0, constant_state(grid, 1.0), noise(grid, 10))
    flow = variational_flow(coeffs, ensemble, present_direction(grid, [1.0]))
    expected = (1 + 0.5 * grid.dt) ** np.arange(21)
    np.testing.assert_allclose(flow.presents[3, :, 0], expected, rtol=1e-6)


def test_method_of_steps_closed_form():
    grid = PathGrid(1.0, 20)
    xi = method_of_steps(1.0, 0.5, 1.0, grid)
    assert xi.shape == (21, 1)
    assert xi[-1, 0] == pytest.approx(1.0 + 1.0 + 1.0 / 8.0, rel=1e-12)
    assert xi[10, 0] == pytest.approx(1.5, rel=1e-12)


def test_moment_statistic(grid):
    ensemble = simulate_forward(linear_drift(0.0), 0.0, constant_state(grid, 2.0), noise(grid, 5))
    assert moment_statistic(ensemble, 2.0) == pytest.approx(4.0)


def test_snapshot_round_trip(grid, tmp_path):
    coeffs = linear_drift(0.1, 1.0)
    ensemble = simulate_forward(coeffs, 0.25, constant_state(grid, 0.5), noise(grid, 30))
    path = write_snapshot(ensemble, str(tmp_path / "ensemble.feather"))
    back = read_snapshot(path)
    np.testing.assert_array_equal(back.presents, ensemble.presents)
    np.testing.assert_array_equal(back.dW, ensemble.dW)
    np.testing.assert_array_equal(back.x0.past, ensemble.x0.past)
    assert back.t0 == 0.25
    assert back.noise.seed == 3


def test_export_csv(grid, tmp_path):
    import pandas as pd
    ensemble = simulate_forward(linear_drift(0.0, 1.0), 0.0, constant_state(grid, 0.0), noise(grid, 4))
    frame = pd.read_csv(export_csv(ensemble, str(tmp_path / "paths.csv")))
    assert list(frame.columns) == ["path", "step", "time", "x0"]
    assert len(frame) == 4 * 21


def test_check_coefficients(grid):
    coeffs = get_benchmark("delay-integral").coefficients(grid)
    ensemble = simulate_forward(coeffs, 0.0, constant_state(grid, 1.0), noise(grid, 50))
    report = check_coefficients(coeffs, ensemble.terminal_state())
    assert report["drift_growth_ok"] and report["driver_lipschitz_ok"]
