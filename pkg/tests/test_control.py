import numpy as np
import pytest

from bench import get_benchmark
from common.errors import DegenerateNoise, NonCoercive, ResolveWithLargerM, UnboundedControl
from control import (
    ControlProblem, closed_loop, coercivity, cost, cutoff, fundamental_relation_audit, gamma0,
    gamma0_discontinuity, hamiltonian, quadratic_hamiltonian, search_radius, solve_hjb, solve_hjb_adaptive,
    truncate_hamiltonian,
)
from segment import PathGrid, constant_state
from tests.conftest import noise, within


def half_square(u):
    return 0.5 * np.sum(u ** 2, axis=-1)


def numeric_problem(d1: int = 1, bound=None) -> ControlProblem:
    return ControlProblem(
        control_Q=half_square, terminal_Upsilon=lambda x: x.present[..., 0], sigma=np.eye(d1), control_bound=bound,
    )


@pytest.fixture
def lq():
    grid = PathGrid(1.0, 10)
    bench = get_benchmark("lq-control")
    return (
        grid, bench.control_problem(grid), bench.coefficients(grid), bench.initial_state(grid),
        bench.regression_basis(grid, 1),
    )


@pytest.fixture
def solved(lq, pool):
    grid, p, coeffs, x0, basis = lq
    return solve_hjb(p, 0.0, x0, coeffs, noise(grid, 2000), basis, pool=pool)


def test_cutoff():
    z = np.array([[0.5], [1.5], [3.0], [-1.5]])
    np.testing.assert_allclose(cutoff(z, 1.0), [[0.5], [0.75], [0.0], [-0.75]])


def test_quadratic_closed_forms():
    value, minimizer = quadratic_hamiltonian()
    np.testing.assert_allclose(value(np.array([[3.0, 4.0]])), [-12.5])
    np.testing.assert_allclose(minimizer(np.array([[3.0, 4.0]])), [[-3.0, -4.0]])
    value, minimizer = quadratic_hamiltonian(1.0)
    np.testing.assert_allclose(value(np.array([[0.5], [3.0]])), [-0.125, -2.5])
    np.testing.assert_allclose(minimizer(np.array([[0.5], [3.0]])), [[-0.5], [-1.0]])


@pytest.mark.parametrize("d1", [1, 2])
def test_numeric_hamiltonian(d1):
    p = numeric_problem(d1)
    z = np.random.default_rng(d1).normal(size=(5, d1)) * 2
    np.testing.assert_allclose(hamiltonian(p, z), -0.5 * np.sum(z ** 2, axis=-1), rtol=1e-6)
    np.testing.assert_allclose(gamma0(p, z), -z, atol=1e-6)
    assert hamiltonian(p, np.zeros((1, d1)))[0] == 0.0


@pytest.mark.parametrize("center", [[0.2], [0.2, -0.1]])
def test_numeric_hamiltonian_shifted_minimizer(center):
    c = np.array(center)
    p = ControlProblem(
        control_Q=lambda u: 0.5 * np.sum((u - c) ** 2, axis=-1), terminal_Upsilon=None, sigma=np.eye(len(c)),
    )
    z = np.concatenate([np.zeros((1, len(c))), np.full((1, len(c)), 0.05), np.random.default_rng(3).normal(size=(4, len(c)))])
    # inf_u Q(u) + z u = z c - |z|^2 / 2 at u = c - z
    np.testing.assert_allclose(hamiltonian(p, z), z @ c - 0.5 * np.sum(z ** 2, axis=-1), atol=1e-8)
    np.testing.assert_allclose(gamma0(p, z), c - z, atol=1e-6)
    assert hamiltonian(p, np.zeros((1, len(c))))[0] == pytest.approx(0.0, abs=1e-10)
    assert np.all(search_radius(p, np.zeros((1, len(c)))) > np.linalg.norm(c))


def test_numeric_bounded_hamiltonian():
    p = numeric_problem(bound=1.0)
    z = np.array([[0.5], [2.0], [-3.0]])
    value, minimizer = quadratic_hamiltonian(1.0)
    np.testing.assert_allclose(hamiltonian(p, z), value(z), atol=1e-12)
    np.testing.assert_allclose(gamma0(p, z), minimizer(z), atol=1e-9)


def test_numeric_bounded_hamiltonian_2d():
    p = numeric_problem(d1=2, bound=1.0)
    rng = np.random.default_rng(10)
    directions = rng.normal(size=(100, 2))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    z = np.linspace(0.5, 1.5, 100)[:, None] * directions
    norms = np.linalg.norm(z, axis=1)
    piecewise = -np.where(norms <= 1.0, 0.5 * norms ** 2, norms - 0.5)
    np.testing.assert_allclose(hamiltonian(p, z), piecewise, atol=1e-8)
    assert np.all(np.linalg.norm(gamma0(p, z), axis=1) <= 1.0 + 1e-12)


def test_coercivity():
    p = numeric_problem()
    a, b = coercivity(p)
    assert a == pytest.approx(0.25)
    assert b == 0.0
    np.testing.assert_allclose(search_radius(p, np.array([[2.0]])), [16.0])
    with pytest.raises(NonCoercive):
        coercivity(ControlProblem(control_Q=lambda u: np.zeros(u.shape[:-1]), terminal_Upsilon=None, sigma=[[1.0]]))


def test_truncation():
    p = numeric_problem()
    with pytest.raises(ValueError):
        truncate_hamiltonian(p, 0.0)
    truncated = truncate_hamiltonian(p, 1.0)
    assert truncated.truncation_M == 1.0 and p.truncation_M is None
    assert hamiltonian(truncated, np.array([[3.0]]))[0] == pytest.approx(0.0, abs=1e-12)
    assert hamiltonian(truncated, np.array([[0.5]]))[0] == pytest.approx(-0.125)


def test_gamma0_lipschitz():
    assert gamma0_discontinuity(numeric_problem()) == pytest.approx(1.0, rel=1e-6)


def test_hjb_value(lq, solved):
    grid, p, coeffs, x0, basis = lq
    expected = 0.5 - 0.5 * 0.8 ** 2
    assert within(solved.value.mean, expected, solved.value.std_error, bias=0.01)
    assert 0.6 < solved.max_abs_z < 1.2
    assert solved.M == 4.0


def test_resolve_with_larger_m(lq, pool):
    grid, p, coeffs, x0, basis = lq
    with pytest.raises(ResolveWithLargerM) as info:
        solve_hjb(p, 0.0, x0, coeffs, noise(grid, 1000), basis, M=0.5, pool=pool)
    assert info.value.M == 0.5
    result = solve_hjb_adaptive(p, 0.0, x0, coeffs, noise(grid, 1000), basis, M=0.5, pool=pool)
    assert result.M > 0.5
    assert result.max_abs_z < result.M


def test_closed_loop(lq, solved, pool):
    grid, p, coeffs, x0, basis = lq
    result = closed_loop(p, 0.0, x0, solved.policy, coeffs, noise(grid, 2000, seed=1003), pool)
    assert result.ensemble.controls.shape == (2000, 10, 1)
    assert within(result.cost.mean, 0.18, result.cost.std_error, bias=0.02)
    assert 0.0 <= result.extrapolation_fraction <= 1.0


def test_closed_loop_guards(lq, solved):
    grid, p, coeffs, x0, basis = lq
    with pytest.raises(ValueError):
        closed_loop(p, 0.0, x0, solved.policy, coeffs, noise(grid, 200))
    with pytest.raises(DegenerateNoise):
        closed_loop(p, 0.0, x0, solved.policy, coeffs.replace(sigma=[[0.0]]), noise(grid, 200, seed=9))


def test_cost_of_fixed_controls(lq, pool):
    grid, p, coeffs, x0, basis = lq
    idle = cost(p, 0.0, x0, [0.0], coeffs, noise(grid, 2000), pool)
    assert within(idle.mean, 0.5, idle.std_error)
    pushed = cost(p, 0.0, x0, [-1.0], coeffs, noise(grid, 2000), pool)
    # q (y - sigma) + 1/2
    assert within(pushed.mean, 0.5 - 0.8 + 0.5, pushed.std_error)
    with pytest.raises(UnboundedControl):
        cost(p, 0.0, x0, [np.inf], coeffs, noise(grid, 20))


def test_bounded_controls_are_enforced(pool):
    grid = PathGrid(1.0, 10)
    bench = get_benchmark("truncated-hamiltonian")
    p = bench.control_problem(grid)
    with pytest.raises(UnboundedControl):
        cost(p, 0.0, bench.initial_state(grid), [2.0], bench.coefficients(grid), noise(grid, 20), pool)


def test_fundamental_relation(lq, solved, pool):
    grid, p, coeffs, x0, basis = lq
    fresh = noise(grid, 2000, seed=1004)
    at_policy = fundamental_relation_audit(p, 0.0, x0, solved.policy, solved, coeffs, fresh, pool)
    assert abs(at_policy.gap) < 1e-10
    assert within(at_policy.relation_residual, 0.0, at_policy.relation_std_error, bias=0.02)
    constant = fundamental_relation_audit(p, 0.0, x0, [0.3], solved, coeffs, fresh, pool)
    assert constant.gap <= 0.0
    assert constant.cost > at_policy.cost
