"""
The value function u(t, x) = Y_t^{t,x}, its finite-difference derivatives and the checks built on them.

Every stencil reuses one NoiseSpec. Increments are keyed by absolute grid step, so values at
different start times share the noise of their common steps as well.
"""
import hashlib
import json
import typing as t
from dataclasses import dataclass, field, replace

import numpy as np

from common.colors import get_logger
from common.cache import VALUE_CACHE
from common.config import CONFIG
from common.errors import CoefficientEvaluation, DriverEvaluation, NonGridTime, StencilOverflow
from common.pool import WorkerPool
from segment import LiftedState, SmoothProfile, present_direction, sample_profile, sup_norm
from forward import CoefficientSet, NoiseSpec, simulate_forward
from bsde import BsdeSolution, RegressionBasis, solve_bsde

logger = get_logger(__name__)


@dataclass(frozen=True, eq=False)
class ValueQuery:
    t0: float
    x0: LiftedState
    coeffs: CoefficientSet
    mc: NoiseSpec
    basis: t.Optional[RegressionBasis] = None
    scheme: t.Optional[str] = None

    def __post_init__(self):
        if self.mc.grid != self.x0.grid:
            raise ValueError(f"noise grid {self.mc.grid} != state grid {self.x0.grid}")
        self.mc.grid.index_of(self.t0)

    @property
    def grid(self):
        return self.mc.grid

    def resolved_basis(self) -> RegressionBasis:
        return self.basis or RegressionBasis.default(self.grid, self.x0.d)

    def at(self, t0: t.Optional[float] = None, x0: t.Optional[LiftedState] = None) -> "ValueQuery":
        return replace(self, t0=self.t0 if t0 is None else t0, x0=self.x0 if x0 is None else x0)

    def cache_digest(self) -> t.Optional[str]:
        if self.coeffs.cache_key is None:
            return None
        h = hashlib.sha1()
        h.update(self.x0.present.tobytes())
        h.update(self.x0.past.tobytes())
        basis = self.resolved_basis().describe() if not self.coeffs.driver_is_zero else None
        meta = [self.coeffs.cache_key, self.t0, self.mc.seed, self.mc.n_paths, self.grid.horizon_T,
                self.grid.n_steps, basis, self.scheme]
        h.update(json.dumps(meta, sort_keys=True).encode())
        return h.hexdigest()


@dataclass(frozen=True, eq=False)
class ValueEstimate:
    mean: float
    std_error: float
    n_paths: int
    # Pathwise samples; differences of CRN estimates take their error from these.
    samples: t.Optional[np.ndarray] = field(default=None, repr=False)

    def to_dict(self) -> t.Dict[str, t.Any]:
        return {"value": self.mean, "std_error": self.std_error, "n_paths": self.n_paths}


def _estimate(mean: float, samples: np.ndarray) -> ValueEstimate:
    n = len(samples)
    std_error = float(np.std(samples, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return ValueEstimate(float(mean), std_error, n, samples)


def solve_value(q: ValueQuery, pool: t.Optional[WorkerPool] = None) -> t.Tuple[ValueEstimate, t.Optional[BsdeSolution]]:
    """Value at (t0, x0) together with the BSDE solution behind it (None when no solve was needed)."""
    grid = q.grid
    if grid.index_of(q.t0) == grid.n_steps:
        terminal = float(q.coeffs.Phi(q.x0))
        return ValueEstimate(terminal, 0.0, q.mc.n_paths, np.full(q.mc.n_paths, terminal)), None
    ensemble = simulate_forward(q.coeffs, q.t0, q.x0, q.mc, pool=pool)
    solution = solve_bsde(ensemble, q.coeffs, q.resolved_basis(), scheme=q.scheme)
    return _estimate(solution.y0, solution.pathwise), solution


def value(q: ValueQuery, pool: t.Optional[WorkerPool] = None) -> ValueEstimate:
    """u(t0, x0); plain MC average of Phi(X_T) when G == 0, regression BSDE otherwise."""
    grid = q.grid
    if grid.index_of(q.t0) == grid.n_steps:
        return solve_value(q, pool)[0]
    digest = q.cache_digest() if CONFIG.get("cache", "enabled", False) else None
    if digest is not None:
        cached = VALUE_CACHE.get_object(digest)
        if cached is not None:
            return cached
    if q.coeffs.driver_is_zero:
        ensemble = simulate_forward(q.coeffs, q.t0, q.x0, q.mc, pool=pool)
        samples = q.coeffs.Phi(ensemble.terminal_state()).copy()
        estimate = _estimate(samples.mean(), samples)
    else:
        estimate = solve_value(q, pool)[0]
    if digest is not None:
        VALUE_CACHE.set_object(digest, estimate)
    return estimate


def default_eps(x0: LiftedState) -> float:
    return float(CONFIG.get("stencil", "eps_rel", 1e-3)) * (1.0 + sup_norm(x0))


def default_eps2(x0: LiftedState) -> float:
    return float(CONFIG.get("stencil", "eps2_rel", 5e-2)) * (1.0 + sup_norm(x0))


def _stencil_values(q: ValueQuery, states: t.Sequence[LiftedState], pool: t.Optional[WorkerPool] = None) -> t.List[ValueEstimate]:
    pool = pool or WorkerPool()
    try:
        return pool.map(lambda x: value(q.at(x0=x)), list(states))
    except (CoefficientEvaluation, DriverEvaluation) as e:
        raise StencilOverflow(f"perturbed state broke coefficient evaluation: {e}") from e


def _difference(plus: ValueEstimate, minus: ValueEstimate, scale: float) -> ValueEstimate:
    mean = (plus.mean - minus.mean) / scale
    return _estimate(mean, (plus.samples - minus.samples) / scale)


def directional_derivative(
        q: ValueQuery, h: LiftedState, eps: t.Optional[float] = None, pool: t.Optional[WorkerPool] = None
    ) -> ValueEstimate:
    """(u(x0 + eps h) - u(x0 - eps h)) / (2 eps) under common random numbers."""
    eps = default_eps(q.x0) if eps is None else eps
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    plus, minus = _stencil_values(q, [q.x0 + eps * h, q.x0 - eps * h], pool)
    return _difference(plus, minus, 2 * eps)


def sigma_directions(coeffs: CoefficientSet, x0: LiftedState, frame: t.Optional[np.ndarray] = None) -> t.List[LiftedState]:
    """(sigma R e_j, 0) for j < d1; R is an orthonormal frame of R^{d1}, identity by default."""
    columns = coeffs.sigma if frame is None else coeffs.sigma @ np.asarray(frame, dtype=float)
    return [present_direction(x0.grid, columns[:, j]) for j in range(columns.shape[1])]


def du_sigma(q: ValueQuery, eps: t.Optional[float] = None, pool: t.Optional[WorkerPool] = None) -> t.List[ValueEstimate]:
    """Components of Du(t0, x0) Sigma."""
    return [directional_derivative(q, h, eps, pool) for h in sigma_directions(q.coeffs, q.x0)]


def second_trace(
        q: ValueQuery,
        eps2: t.Optional[float] = None,
        frame: t.Optional[np.ndarray] = None,
        pool: t.Optional[WorkerPool] = None,
    ) -> ValueEstimate:
    """1/2 tr[Sigma Sigma* D^2 u] as 1/2 sum_j second differences along sigma R e_j, one noise for the whole stencil."""
    eps2 = default_eps2(q.x0) if eps2 is None else eps2
    if eps2 <= 0:
        raise ValueError(f"eps2 must be positive, got {eps2}")
    directions = sigma_directions(q.coeffs, q.x0, frame)
    states = [q.x0]
    for h in directions:
        states += [q.x0 + eps2 * h, q.x0 - eps2 * h]
    values = _stencil_values(q, states, pool)
    center = values[0]
    mean, samples = 0.0, np.zeros(q.mc.n_paths)
    for j in range(len(directions)):
        plus, minus = values[1 + 2 * j], values[2 + 2 * j]
        mean += 0.5 * (plus.mean - 2 * center.mean + minus.mean) / eps2 ** 2
        samples += 0.5 * (plus.samples - 2 * center.samples + minus.samples) / eps2 ** 2
    return _estimate(mean, samples)


@dataclass(frozen=True)
class ZIdentification:
    time: float
    z_bsde: t.List[float]
    du_sigma: t.List[float]
    abs_gap: float
    rel_gap: float
    std_error: float


def _z_gap(time: float, z: np.ndarray, z_se: float, derivatives: t.List[ValueEstimate]) -> ZIdentification:
    du = np.array([e.mean for e in derivatives])
    abs_gap = float(np.linalg.norm(z - du))
    std_error = float(np.sqrt(z_se ** 2 + sum(e.std_error ** 2 for e in derivatives)))
    return ZIdentification(time, z.tolist(), du.tolist(), abs_gap, abs_gap / (1.0 + float(np.linalg.norm(z))), std_error)


def z_identification_gap(
        q: ValueQuery,
        interior_times: t.Sequence[float] = (),
        eps: t.Optional[float] = None,
        pool: t.Optional[WorkerPool] = None,
    ) -> t.List[ZIdentification]:
    """
    |Z_{t0} - Du(t0, x0) Sigma| / (1 + |Z_{t0}|), and the same comparison at interior times
    between the fitted decoupling field and a fresh stencil at a sample state of the ensemble.
    """
    _, solution = solve_value(q, pool)
    if solution is None:
        raise NonGridTime(q.t0, q.grid.dt)
    z0 = solution.z0
    z_se = float(np.max(np.std(solution.Z[:, 0], axis=0, ddof=1)) / np.sqrt(q.mc.n_paths))
    out = [_z_gap(q.t0, z0, z_se, du_sigma(q, eps, pool))]
    ensemble = solution.ensemble
    for time in interior_times:
        k = q.grid.index_of(time) - ensemble.k0
        if not 0 < k < ensemble.n_steps:
            raise NonGridTime(time, q.grid.dt)
        x = ensemble.state_of(0, k)
        z_fit = solution.predict_z(k, x.broadcast(1))[0]
        out.append(_z_gap(time, z_fit, 0.0, du_sigma(q.at(t0=time, x0=x), eps, pool)))
    return out


@dataclass(frozen=True)
class Term:
    value: float
    std_error: float


@dataclass(frozen=True, eq=False)
class ResidualReport:
    t0: float
    du_dt: Term
    du_Ax: Term
    du_B: Term
    trace_term: Term
    g_term: Term
    residual: float
    error_budget: float
    # dt |du/dt|: first-order bias allowance of the one-step time difference, included in error_budget.
    time_step_allowance: float
    stencil_eps: t.Dict[str, float]
    grid: t.Dict[str, t.Any]
    seed: int
    n_paths: int

    def to_dict(self) -> t.Dict[str, t.Any]:
        terms = {
            name: {"value": term.value, "std_error": term.std_error}
            for name, term in (
                ("du_dt", self.du_dt), ("du_Ax", self.du_Ax), ("du_B", self.du_B),
                ("trace_term", self.trace_term), ("g_term", self.g_term),
            )
        }
        return {
            "t0": self.t0,
            "terms": terms,
            "residual": self.residual,
            "error_budget": self.error_budget,
            "time_step_allowance": self.time_step_allowance,
            "stencil": self.stencil_eps,
            "grid": self.grid,
            "seed": self.seed,
            "n_paths": self.n_paths,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def time_derivative(q: ValueQuery, pool: t.Optional[WorkerPool] = None) -> ValueEstimate:
    """Central difference over one grid step at fixed x0; one-sided at t0 = 0 and t0 = T - dt."""
    grid = q.grid
    k = grid.index_of(q.t0)
    if k >= grid.n_steps:
        raise NonGridTime(q.t0, grid.dt)
    if k == 0:
        lo, hi = k, k + 1
    elif k == grid.n_steps - 1:
        lo, hi = k - 1, k
    else:
        lo, hi = k - 1, k + 1
    later, earlier = (WorkerPool() if pool is None else pool).map(
        lambda j: value(q.at(t0=grid.time(j))), [hi, lo]
    )
    return _difference(later, earlier, (hi - lo) * grid.dt)


def pde_residual(
        t0: float,
        profile: SmoothProfile,
        coeffs: CoefficientSet,
        mc: NoiseSpec,
        basis: t.Optional[RegressionBasis] = None,
        eps: t.Optional[float] = None,
        eps2: t.Optional[float] = None,
        pool: t.Optional[WorkerPool] = None,
    ) -> ResidualReport:
    """du/dt + Du[Ax] + Du[B] + 1/2 tr[Sigma Sigma* D^2 u] - G(t0, x0, u, Du Sigma) at x0 built from a smooth profile."""
    x0, ax = sample_profile(profile, mc.grid)
    q = ValueQuery(t0, x0, coeffs, mc, basis)
    eps = default_eps(x0) if eps is None else eps
    eps2 = default_eps2(x0) if eps2 is None else eps2
    b_direction = present_direction(mc.grid, coeffs.b(t0, x0.broadcast(1))[0])
    pool = pool or WorkerPool()
    jobs = [
        lambda: value(q),
        lambda: time_derivative(q),
        lambda: directional_derivative(q, ax, eps),
        lambda: directional_derivative(q, b_direction, eps),
        lambda: second_trace(q, eps2),
        lambda: du_sigma(q, eps),
    ]
    u, du_dt, du_ax, du_b, trace, z_terms = pool.map(lambda job: job(), jobs)
    z = np.array([e.mean for e in z_terms])[None, :]
    g = float(coeffs.G(t0, x0.broadcast(1), np.array([u.mean]), z)[0])
    # First-order propagation of the u and Du Sigma errors through G.
    _, g_y, g_z = coeffs.G_partials(t0, x0.broadcast(1), np.array([u.mean]), z, 0.0 * x0.broadcast(1))
    g_se = float(np.sqrt((g_y[0] * u.std_error) ** 2 + sum((g_z[0, j] * e.std_error) ** 2 for j, e in enumerate(z_terms))))
    terms = [Term(e.mean, e.std_error) for e in (du_dt, du_ax, du_b, trace)]
    g_term = Term(g, g_se)
    residual = terms[0].value + terms[1].value + terms[2].value + terms[3].value - g_term.value
    allowance = mc.grid.dt * abs(du_dt.mean)
    budget = float(np.sqrt(sum(term.std_error ** 2 for term in terms + [g_term]))) + allowance
    report = ResidualReport(
        t0=t0, du_dt=terms[0], du_Ax=terms[1], du_B=terms[2], trace_term=terms[3], g_term=g_term,
        residual=residual, error_budget=budget, time_step_allowance=allowance,
        stencil_eps={"eps": eps, "eps2": eps2, "dt": mc.grid.dt},
        grid={"T": mc.grid.horizon_T, "N": mc.grid.n_steps},
        seed=mc.seed, n_paths=mc.n_paths,
    )
    logger.info(f"PDE residual of '{coeffs.name}' at t0={t0}: {residual:.4g} (budget {budget:.2g})")
    return report


@dataclass(frozen=True)
class FlowGap:
    gap: float
    std_error: float
    u0: float
    propagated: float
    mode: str


# Stream index of the out-of-sample paths; nested inner runs use indices below n_outer.
FRESH_STREAM = 1 << 32


def _derived_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)[0])


def flow_property_gap(
        t0: float,
        t1: float,
        x0: LiftedState,
        coeffs: CoefficientSet,
        mc: NoiseSpec,
        basis: t.Optional[RegressionBasis] = None,
        mode: str = "decoupling",
        n_outer: t.Optional[int] = None,
        n_inner: t.Optional[int] = None,
        pool: t.Optional[WorkerPool] = None,
    ) -> FlowGap:
    """
    |u(t0, x0) - E[u(t1, X_{t1}) - int_{t0}^{t1} G dr]|. The inner u is the fitted decoupling
    field on an independent ensemble ("decoupling") or an independent value call per outer path ("nested").
    """
    grid = mc.grid
    k0, k1 = grid.index_of(t0), grid.index_of(t1)
    if k1 < k0:
        raise ValueError(f"t1={t1} precedes t0={t0}")
    if k1 == k0:
        return FlowGap(0.0, 0.0, float("nan"), float("nan"), mode)
    q = ValueQuery(t0, x0, coeffs, mc, basis)
    dt = grid.dt
    steps = k1 - k0
    if mode == "decoupling":
        u0, solution = solve_value(q, pool)
        # Out-of-sample paths for the fitted field.
        fresh = simulate_forward(coeffs, t0, x0, mc.with_seed(_derived_seed(mc.seed, FRESH_STREAM)), pool=pool)
        inner = solution.predict_y(steps, fresh.state(steps))
        integral = np.zeros(fresh.n_paths)
        if not coeffs.driver_is_zero:
            for k in range(steps):
                integral += dt * solution.predict_step(k, fresh.state(k), coeffs)[1]
    elif mode == "nested":
        n_outer = n_outer or int(CONFIG.get("flow", "n_outer", 200))
        n_inner = n_inner or int(CONFIG.get("flow", "n_inner", 400))
        u0, _ = solve_value(q, pool)
        outer_q = replace(q, mc=mc.with_paths(n_outer))
        ensemble = simulate_forward(coeffs, t0, x0, outer_q.mc, pool=pool)
        if coeffs.driver_is_zero:
            integral = np.zeros(n_outer)
        else:
            outer = solve_bsde(ensemble, coeffs, outer_q.resolved_basis())
            integral = dt * outer.driver_values[:, :steps].sum(axis=1)
        x1 = ensemble.state(steps)

        def inner_value(p: int) -> float:
            inner_noise = NoiseSpec(_derived_seed(mc.seed, p), n_inner, mc.d1, grid)
            return value(ValueQuery(t1, x1.take(p), coeffs, inner_noise, basis)).mean

        inner = np.array((pool or WorkerPool()).map(inner_value, list(range(n_outer))))
    else:
        raise ValueError(f"Unknown mode '{mode}', expected 'decoupling' or 'nested'")
    propagated = _estimate(np.mean(inner - integral), inner - integral)
    gap = abs(u0.mean - propagated.mean)
    std_error = float(np.sqrt(u0.std_error ** 2 + propagated.std_error ** 2))
    return FlowGap(gap, std_error, u0.mean, propagated.mean, mode)


@dataclass(frozen=True)
class GrowthFit:
    c: float
    m: int
    ratios: t.List[float]


def growth_fit(
        states: t.Sequence[LiftedState],
        coeffs: CoefficientSet,
        mc: NoiseSpec,
        t0: float = 0.0,
        basis: t.Optional[RegressionBasis] = None,
        pool: t.Optional[WorkerPool] = None,
    ) -> GrowthFit:
    """Smallest c with |u(t0, x)| <= c (1 + sup_norm(x)^m) over the given states."""
    m = coeffs.growth_m
    pool = pool or WorkerPool()
    values = pool.map(lambda x: value(ValueQuery(t0, x, coeffs, mc, basis)), list(states))
    ratios = [abs(v.mean) / (1.0 + sup_norm(x) ** m) for v, x in zip(values, states)]
    return GrowthFit(float(max(ratios)), m, [float(r) for r in ratios])
