"""
Benchmark registry. Each entry builds its coefficient set on a grid and, when one is known,
carries a closed-form expectation tagged with where it comes from:

    TRIVIAL  direct computation (Gaussian moments, constants)
    DERIVED  worked out for this benchmark (ODE, linear flow, LQ completion of squares)
    PAPER    formula quoted from the theory (linear BSDE representation, truncated Hamiltonian)
"""
import typing as t
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from common.errors import BenchmarkUnknown, ConfigInvalid
from segment import LiftedState, PathGrid, SampledPath, SmoothProfile, sample_profile
from forward import CoefficientSet, NoiseSpec, method_of_steps
from bsde import LinearBsdeSpec, RegressionBasis, linear_bsde_closed_form
from control import ControlProblem, quadratic_hamiltonian

TRIVIAL = "TRIVIAL"
DERIVED = "DERIVED"
PAPER = "PAPER"
PROVENANCE_TAGS = (TRIVIAL, DERIVED, PAPER)

ExpectedFn = t.Callable[..., float]


@dataclass(frozen=True)
class Benchmark:
    name: str
    description: str
    build: t.Callable[..., CoefficientSet]
    profile: t.Callable[..., SmoothProfile]
    params: t.Dict[str, float] = field(default_factory=dict)
    closed_form: t.Optional[str] = None
    provenance: t.Optional[str] = None
    # expected(grid, t0, x0, mc, **params) -> float
    expected: t.Optional[ExpectedFn] = None
    problem: t.Optional[t.Callable[..., ControlProblem]] = None
    # Preferred regression basis; None means RegressionBasis.default.
    basis: t.Optional[t.Callable[[PathGrid, int], RegressionBasis]] = None
    # Continuous-time expectation against a first-order scheme: the check allows dt (1 + |expected|).
    first_order: bool = False

    def __post_init__(self):
        if self.closed_form is not None and self.provenance not in PROVENANCE_TAGS:
            raise ValueError(f"benchmark '{self.name}' has an untagged closed form")
        if self.expected is not None and self.closed_form is None:
            raise ValueError(f"benchmark '{self.name}' has an expectation without a closed form")

    def resolve_params(self, overrides: t.Optional[t.Dict[str, t.Any]] = None) -> t.Dict[str, float]:
        params = dict(self.params)
        for key, val in (overrides or {}).items():
            if key not in params:
                raise ConfigInvalid(f"params.{key}", f"'{self.name}' takes {sorted(params)}")
            params[key] = float(val)
        return params

    def coefficients(self, grid: PathGrid, overrides: t.Optional[t.Dict[str, t.Any]] = None) -> CoefficientSet:
        return self.build(grid, **self.resolve_params(overrides))

    def default_profile(self, overrides: t.Optional[t.Dict[str, t.Any]] = None) -> SmoothProfile:
        return self.profile(**self.resolve_params(overrides))

    def initial_state(self, grid: PathGrid, overrides: t.Optional[t.Dict[str, t.Any]] = None) -> LiftedState:
        return sample_profile(self.default_profile(overrides), grid)[0]

    def control_problem(self, grid: PathGrid, overrides: t.Optional[t.Dict[str, t.Any]] = None) -> ControlProblem:
        if self.problem is None:
            raise ConfigInvalid("mode", f"benchmark '{self.name}' has no control problem")
        return self.problem(grid, **self.resolve_params(overrides))

    def regression_basis(self, grid: PathGrid, d: int) -> t.Optional[RegressionBasis]:
        return None if self.basis is None else self.basis(grid, d)

    def expectation(
            self, grid: PathGrid, t0: float, x0: LiftedState, mc: NoiseSpec,
            overrides: t.Optional[t.Dict[str, t.Any]] = None,
        ) -> t.Optional[float]:
        if self.expected is None:
            return None
        return float(self.expected(grid, t0, x0, mc, **self.resolve_params(overrides)))

    def tolerance(self, grid: PathGrid, expected: float, std_error: float) -> float:
        tol = max(3.0 * std_error, 0.01 * abs(expected))
        if self.first_order:
            tol = max(tol, grid.dt * (1.0 + abs(expected)))
        return tol


def constant_profile(value: float) -> SmoothProfile:
    return SmoothProfile(lambda r: np.full(len(r), value), lambda r: np.zeros(len(r)))


def cosine_profile(level: float = 0.5, amplitude: float = 0.5, frequency: float = 1.0) -> SmoothProfile:
    """level + amplitude cos(frequency r); equals level + amplitude at r = 0."""
    return SmoothProfile(
        lambda r: level + amplitude * np.cos(frequency * r),
        lambda r: -amplitude * frequency * np.sin(frequency * r),
    )


def _present(x: LiftedState) -> np.ndarray:
    return x.present[..., 0]


def _integral(x: LiftedState) -> np.ndarray:
    """int_{-T}^0 phi(r) dr with the right-continuous samples."""
    return x.grid.dt * x.past[..., 0].sum(axis=-1)


def _delay_slot(grid: PathGrid, tau: float) -> int:
    """Past slot of r = -tau."""
    slot = grid.n_steps - grid.index_of(tau)
    if not 0 <= slot < grid.n_steps:
        raise ConfigInvalid("params.tau", f"delay {tau} must lie in (0, T]")
    return slot


# -- value benchmarks ------------------------------------------------------------------------

def _martingale(grid: PathGrid, sigma: float, y0: float) -> CoefficientSet:
    return CoefficientSet(
        sigma=[[sigma]], terminal=_present, terminal_derivative=lambda x, h: _present(h),
        growth_m=1, z_bound_K=1.0, name="martingale-present", cache_key=f"martingale-present/{sigma}",
    )


def _heat(grid: PathGrid, sigma: float, y0: float) -> CoefficientSet:
    return CoefficientSet(
        sigma=[[sigma]], terminal=lambda x: _present(x) ** 2,
        terminal_derivative=lambda x, h: 2 * _present(x) * _present(h),
        growth_m=2, name="heat-present-square", cache_key=f"heat-present-square/{sigma}",
    )


def _exponential(grid: PathGrid, sigma: float, rate: float) -> CoefficientSet:
    return CoefficientSet(
        sigma=[[sigma]], terminal=lambda x: np.ones(x.batch_shape),
        terminal_derivative=lambda x, h: np.zeros(h.batch_shape),
        driver=lambda s, x, y, z: -rate * y, lipschitz_C=max(abs(rate), 1e-12),
        growth_m=0, name="exponential-driver", cache_key=f"exponential-driver/{sigma}/{rate}",
    )


def _point_delay(grid: PathGrid, a: float, tau: float, sigma: float, y0: float) -> CoefficientSet:
    """b(s, gamma) = a gamma((s - tau) v 0) on the restricted path."""
    grid.index_of(tau)

    def drift(s: float, path: SampledPath) -> np.ndarray:
        return a * path.at(grid.time(max(grid.index_of(s) - grid.index_of(tau), 0)))

    return CoefficientSet(
        sigma=[[sigma]], drift=drift, terminal=_present, terminal_derivative=lambda x, h: _present(h),
        name="point-delay", cache_key=f"point-delay/{a}/{tau}/{sigma}",
    )


def _point_delay_expected(grid: PathGrid, t0: float, x0: LiftedState, mc: NoiseSpec, a: float, tau: float, sigma: float, y0: float) -> float:
    if t0 != 0.0:
        raise ConfigInvalid("query.t0", "the method-of-steps oracle starts at t0 = 0")
    return float(method_of_steps(a, tau, x0.present, grid)[-1, 0])


def _delay_integral(grid: PathGrid, a: float, tau: float, sigma: float, rate: float) -> CoefficientSet:
    """B(x) = a phi(-tau), Phi(x) = y + int phi, G = -rate y."""
    slot = _delay_slot(grid, tau)
    return CoefficientSet(
        sigma=[[sigma]],
        state_drift=lambda s, x: a * x.past[..., slot, :],
        drift_derivative=lambda s, x, h: a * h.past[..., slot, :],
        terminal=lambda x: _present(x) + _integral(x),
        terminal_derivative=lambda x, h: _present(h) + _integral(h),
        driver=lambda s, x, y, z: -rate * y, lipschitz_C=max(abs(a), abs(rate), 1e-12),
        name="delay-integral", cache_key=f"delay-integral/{a}/{tau}/{sigma}/{rate}",
    )


def _linear(grid: PathGrid, a: float, b: float, c: float, eta: float, sigma: float) -> CoefficientSet:
    return CoefficientSet(
        sigma=[[sigma]], terminal=lambda x: np.full(x.batch_shape, eta),
        terminal_derivative=lambda x, h: np.zeros(h.batch_shape),
        driver=lambda s, x, y, z: -(a * y + b * z[..., 0] + c), lipschitz_C=max(abs(a), abs(b)),
        growth_m=0, name="linear-bsde", cache_key=f"linear-bsde/{a}/{b}/{c}/{eta}/{sigma}",
    )


def _linear_expected(grid: PathGrid, t0: float, x0: LiftedState, mc: NoiseSpec, a: float, b: float, c: float, eta: float, sigma: float) -> float:
    spec = LinearBsdeSpec.constant(a, [b], c, eta, mc.n_paths, grid.n_steps - grid.index_of(t0))
    return float(linear_bsde_closed_form(spec, mc, t0)[:, 0].mean())


def _mollifier_profiles(grid: PathGrid, a: float, tau: float, sigma: float) -> CoefficientSet:
    """Point evaluation phi(-tau) in the drift and Phi(x) = y + phi(-tau)^2, neither continuous on L^2 pasts."""
    slot = _delay_slot(grid, tau)
    return CoefficientSet(
        sigma=[[sigma]],
        state_drift=lambda s, x: a * x.past[..., slot, :],
        drift_derivative=lambda s, x, h: a * h.past[..., slot, :],
        terminal=lambda x: _present(x) + x.past[..., slot, 0] ** 2,
        terminal_derivative=lambda x, h: _present(h) + 2 * x.past[..., slot, 0] * h.past[..., slot, 0],
        growth_m=2, name="mollifier-profiles", cache_key=f"mollifier-profiles/{a}/{tau}/{sigma}",
    )


# -- control benchmarks ----------------------------------------------------------------------

def _controlled(grid: PathGrid, q: float, sigma: float, y0: float) -> CoefficientSet:
    """Uncontrolled dynamics dX = sigma dW with terminal cost q y."""
    return CoefficientSet(
        sigma=[[sigma]], terminal=lambda x: q * _present(x), terminal_derivative=lambda x, h: q * _present(h),
        name="lq-control",
    )


def _lq_problem(grid: PathGrid, q: float, sigma: float, y0: float) -> ControlProblem:
    value, minimizer = quadratic_hamiltonian()
    return ControlProblem(
        control_Q=lambda u: 0.5 * np.sum(u ** 2, axis=-1),
        terminal_Upsilon=lambda x: q * _present(x),
        sigma=[[sigma]], hamiltonian_fn=value, minimizer_fn=minimizer, name="lq-control",
    )


def _lq_expected(grid: PathGrid, t0: float, x0: LiftedState, mc: NoiseSpec, q: float, sigma: float, y0: float) -> float:
    return float(q * x0.present[0] - 0.5 * (sigma * q) ** 2 * (grid.horizon_T - t0))


def _truncated(grid: PathGrid, q: float, sigma: float, y0: float, bound: float) -> CoefficientSet:
    return _controlled(grid, q, sigma, y0).replace(name="truncated-hamiltonian")


def _truncated_problem(grid: PathGrid, q: float, sigma: float, y0: float, bound: float) -> ControlProblem:
    value, minimizer = quadratic_hamiltonian(bound)
    return ControlProblem(
        control_Q=lambda u: 0.5 * np.sum(u ** 2, axis=-1),
        terminal_Upsilon=lambda x: q * _present(x),
        sigma=[[sigma]], hamiltonian_fn=value, minimizer_fn=minimizer, control_bound=bound,
        name="truncated-hamiltonian",
    )


def _truncated_expected(grid: PathGrid, t0: float, x0: LiftedState, mc: NoiseSpec, q: float, sigma: float, y0: float, bound: float) -> float:
    value, _ = quadratic_hamiltonian(bound)
    return float(q * x0.present[0] + value(np.array([[sigma * q]]))[0] * (grid.horizon_T - t0))


def _present_basis(grid: PathGrid, d: int) -> RegressionBasis:
    return RegressionBasis.present_only(d, degree=1)


BENCHMARKS: t.Dict[str, Benchmark] = {b.name: b for b in [
    Benchmark(
        "martingale-present", "G = 0, B = 0, Phi(x) = y, sigma = 1",
        _martingale, lambda sigma, y0: constant_profile(y0), {"sigma": 1.0, "y0": 0.5},
        closed_form="u(t, x) = y", provenance=TRIVIAL,
        expected=lambda grid, t0, x0, mc, sigma, y0: x0.present[0],
    ),
    Benchmark(
        "heat-present-square", "G = 0, B = 0, Phi(x) = y^2, sigma = 1",
        _heat, lambda sigma, y0: constant_profile(y0), {"sigma": 1.0, "y0": 0.5},
        closed_form="u(t, x) = y^2 + sigma^2 (T - t)", provenance=TRIVIAL,
        expected=lambda grid, t0, x0, mc, sigma, y0: x0.present[0] ** 2 + sigma ** 2 * (grid.horizon_T - t0),
    ),
    Benchmark(
        "exponential-driver", "G = -rate y, B = 0, Phi = 1",
        _exponential, lambda sigma, rate: constant_profile(1.0), {"sigma": 1.0, "rate": 0.5},
        closed_form="u(t, x) = exp(rate (T - t))", provenance=DERIVED,
        expected=lambda grid, t0, x0, mc, sigma, rate: np.exp(rate * (grid.horizon_T - t0)),
        first_order=True,
    ),
    Benchmark(
        "point-delay", "b(s, gamma) = a gamma((s - tau) v 0), Phi(x) = y, G = 0",
        _point_delay, lambda a, tau, sigma, y0: constant_profile(y0),
        {"a": 1.0, "tau": 0.5, "sigma": 0.0, "y0": 1.0},
        closed_form="E xi_T from the method of steps (T = 1, tau = 1/2: y0 (1 + a + a^2 / 8))", provenance=DERIVED,
        expected=_point_delay_expected,
        first_order=True,
    ),
    Benchmark(
        "delay-integral", "B(x) = a phi(-tau), Phi(x) = y + int phi, G = -rate y",
        _delay_integral, lambda a, tau, sigma, rate: cosine_profile(),
        {"a": 0.5, "tau": 0.5, "sigma": 1.0, "rate": 0.1},
    ),
    Benchmark(
        "linear-bsde", "G = -(a y + b z + c), Phi = eta, B = 0",
        _linear, lambda a, b, c, eta, sigma: constant_profile(0.0),
        {"a": 0.3, "b": 0.2, "c": 0.1, "eta": 1.0, "sigma": 1.0},
        closed_form="Y = Gamma^-1 E[Gamma_T eta + int Gamma c ds]", provenance=PAPER,
        expected=_linear_expected,
        first_order=True,
    ),
    Benchmark(
        "lq-control", "dX = sigma (u ds + dW), cost E[q X_T + int |u|^2 / 2]",
        _controlled, lambda q, sigma, y0: constant_profile(y0), {"q": 1.0, "sigma": 0.8, "y0": 0.5},
        closed_form="v(t, x) = q y - |sigma q|^2 (T - t) / 2", provenance=DERIVED,
        expected=_lq_expected, problem=_lq_problem, basis=_present_basis,
    ),
    Benchmark(
        "truncated-hamiltonian", "lq-control with |u| <= bound, so -H(z) = bound |z| - bound^2 / 2 past the bound",
        _truncated, lambda q, sigma, y0, bound: constant_profile(y0),
        {"q": 2.0, "sigma": 0.8, "y0": 0.5, "bound": 1.0},
        closed_form="v(t, x) = q y + H(sigma q) (T - t), piecewise H", provenance=PAPER,
        expected=_truncated_expected, problem=_truncated_problem, basis=_present_basis,
    ),
    Benchmark(
        "mollifier-profiles", "B(x) = a phi(-tau), Phi(x) = y + phi(-tau)^2, G = 0",
        _mollifier_profiles, lambda a, tau, sigma: cosine_profile(), {"a": 0.5, "tau": 0.5, "sigma": 1.0},
        closed_form="int rho_n = 1 and J^n x -> x uniformly on continuous pasts", provenance=DERIVED,
    ),
]}


def get_benchmark(name: str) -> Benchmark:
    if name not in BENCHMARKS:
        raise BenchmarkUnknown(name, sorted(BENCHMARKS))
    return BENCHMARKS[name]


def list_benchmarks() -> pd.DataFrame:
    rows = [{
        "name": b.name,
        "coefficients": b.description,
        "closed_form": b.closed_form or "",
        "provenance": b.provenance or "",
        "control": b.problem is not None,
    } for b in BENCHMARKS.values()]
    return pd.DataFrame(rows)
