"""
Stochastic control on path space: the Hamiltonian H(z) = inf_u {Q(u) + z u}, the HJB backward
equation with driver G = -(L + H_M(Z)), closed-loop synthesis from the fitted Z regressions,
cost evaluation and the fundamental relation v = J(u) + E int [H(Z) - Z u - Q(u)] ds.
"""
import typing as t
import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property
from threading import Lock

import numpy as np
from tenacity import retry, retry_if_exception_type, stop_after_attempt

from common.colors import get_logger
from common.config import CONFIG
from common.errors import DegenerateNoise, NonCoercive, PolicyExtrapolation, ResolveWithLargerM, UnboundedControl
from common.pool import WorkerPool
from segment import LiftedState
from forward import CoefficientSet, ForwardEnsemble, NoiseSpec, simulate_forward
from bsde import BsdeSolution, RegressionBasis, solve_bsde
from calculus import ValueEstimate

logger = get_logger(__name__)

SEARCH_CHUNK = 256

HamiltonianFn = t.Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class ControlProblem:
    """
    Minimize E int (L + Q(u)) ds + E Upsilon(X_T) over controls entering the drift as sigma u.
    control_Q maps (..., d1) to (...). A closed-form Hamiltonian and minimizer may be supplied;
    otherwise both come from a grid search refined by coordinatewise parabolic steps.
    """
    control_Q: t.Callable[[np.ndarray], np.ndarray]
    terminal_Upsilon: t.Callable[[LiftedState], np.ndarray]
    sigma: np.ndarray
    running_L: t.Optional[t.Callable[[float, LiftedState], np.ndarray]] = None
    hamiltonian_fn: t.Optional[HamiltonianFn] = None
    minimizer_fn: t.Optional[HamiltonianFn] = None
    # Admissible controls |u| <= control_bound.
    control_bound: t.Optional[float] = None
    # Smooth cutoff level of the Hamiltonian argument; None means untruncated.
    truncation_M: t.Optional[float] = None
    n_grid: int = field(default_factory=lambda: int(CONFIG.get("control", "n_grid", 101)))
    refine_iters: int = field(default_factory=lambda: int(CONFIG.get("control", "refine_iters", 3)))
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "sigma", np.atleast_2d(np.asarray(self.sigma, dtype=float)))

    @property
    def d1(self) -> int:
        return self.sigma.shape[1]

    def L(self, time: float, x: LiftedState) -> np.ndarray:
        if self.running_L is None:
            return np.zeros(x.batch_shape)
        return np.broadcast_to(np.asarray(self.running_L(time, x), dtype=float), x.batch_shape)

    def Q(self, u: np.ndarray) -> np.ndarray:
        return np.asarray(self.control_Q(np.asarray(u, dtype=float)), dtype=float)

    @cached_property
    def coercivity_constants(self) -> t.Tuple[float, float]:
        return coercivity(self)

    @cached_property
    def unit_grid(self) -> np.ndarray:
        """Points of the unit ball on a uniform grid, ordered by norm then lexicographically."""
        axis = np.linspace(-1.0, 1.0, self.n_grid if self.n_grid % 2 else self.n_grid + 1)
        points = np.stack(np.meshgrid(*([axis] * self.d1), indexing="ij"), axis=-1).reshape(-1, self.d1)
        norms = np.linalg.norm(points, axis=1)
        points, norms = points[norms <= 1 + 1e-12], norms[norms <= 1 + 1e-12]
        order = np.lexsort(tuple(points[:, j] for j in reversed(range(self.d1))) + (np.round(norms, 12),))
        return points[order]


def coercivity(p: ControlProblem, radii: t.Optional[np.ndarray] = None, n_directions: int = 16, seed: int = 0) -> t.Tuple[float, float]:
    """(a, b) with Q(u) >= a |u|^2 - b; a from the outermost radius, b over every sampled point."""
    radii = np.geomspace(1e-2, 100.0, 17) if radii is None else np.asarray(radii, dtype=float)
    rng = np.random.default_rng(seed)
    directions = np.concatenate([np.eye(p.d1), -np.eye(p.d1), rng.normal(size=(n_directions, p.d1))])
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    points = (radii[:, None, None] * directions[None]).reshape(-1, p.d1)
    values = p.Q(points)
    norms2 = np.sum(points ** 2, axis=1)
    outer = norms2 >= radii.max() ** 2 * (1 - 1e-9)
    a = 0.5 * float(np.min(values[outer] / norms2[outer]))
    if not np.isfinite(a) or a <= 0:
        raise NonCoercive(f"control cost of '{p.name}' is not coercive on the sampled radii (a = {a:.3g})")
    b = float(max(0.0, np.max(a * norms2 - values), -float(p.Q(np.zeros(p.d1)))))
    return a, b


def radius_for(p: ControlProblem, z_norm: np.ndarray) -> np.ndarray:
    """
    Search radius for |z| = z_norm: at least 2 (|z| + sqrt(b)) / a, and wide enough to hold the
    sublevel set {Q(u) + z u <= Q(0)}, which contains every minimizer.
    """
    a, b = p.coercivity_constants
    z_norm = np.asarray(z_norm, dtype=float)
    q0 = float(p.Q(np.zeros(p.d1)))
    sublevel = (z_norm + np.sqrt(z_norm ** 2 + 4.0 * a * max(0.0, b + q0))) / (2.0 * a)
    radius = np.maximum(2.0 * (z_norm + np.sqrt(b)) / a, sublevel)
    if p.control_bound is not None:
        radius = np.minimum(radius, p.control_bound)
    return radius


def search_radius(p: ControlProblem, z: np.ndarray) -> np.ndarray:
    return radius_for(p, np.linalg.norm(z, axis=-1))


def _project(p: ControlProblem, u: np.ndarray) -> np.ndarray:
    if p.control_bound is None:
        return u
    norms = np.linalg.norm(u, axis=-1, keepdims=True)
    return np.where(norms > p.control_bound, u * p.control_bound / np.maximum(norms, 1e-300), u)


def _polish(p: ControlProblem, objective: t.Callable[[np.ndarray], np.ndarray], u: np.ndarray, best: np.ndarray):
    """Projected gradient steps of length 1, 1/2, ... on a central-difference gradient; improvements only."""
    h = 1e-6 * (1.0 + np.linalg.norm(u, axis=-1, keepdims=True))
    grad = np.stack([objective(u + h * e) - objective(u - h * e) for e in np.eye(p.d1)], axis=-1) / (2.0 * h)
    start = u
    for s in 0.5 ** np.arange(8):
        trial = _project(p, start - s * grad)
        trial_value = objective(trial)
        better = trial_value < best
        u = np.where(better[:, None], trial, u)
        best = np.where(better, trial_value, best)
    return best, u


def _search(p: ControlProblem, z: np.ndarray) -> t.Tuple[np.ndarray, np.ndarray]:
    objective = lambda u: p.Q(u) + np.sum(u * z, axis=-1)
    radius = search_radius(p, z)
    unit = p.unit_grid
    candidates = radius[:, None, None] * unit[None]
    values = p.Q(candidates) + np.einsum("pgd,pd->pg", candidates, z)
    # argmin keeps the first minimum, i.e. the smallest norm under the grid ordering.
    u = candidates[np.arange(len(z)), np.argmin(values, axis=1)]
    best = objective(u)
    spacing = 2.0 / (max(p.n_grid, 2) - 1)
    delta = radius * spacing
    for _ in range(p.refine_iters):
        for j in range(p.d1):
            e = np.zeros(p.d1)
            e[j] = 1.0
            step = delta[:, None] * e
            f_plus, f_minus = objective(u + step), objective(u - step)
            curvature = f_plus - 2 * best + f_minus
            with np.errstate(divide="ignore", invalid="ignore"):
                offset = np.where(curvature > 0, 0.5 * (f_minus - f_plus) / curvature, 0.0)
            trial = _project(p, u + np.clip(offset, -1.0, 1.0)[:, None] * step)
            trial_value = objective(trial)
            better = trial_value < best
            u = np.where(better[:, None], trial, u)
            best = np.where(better, trial_value, best)
        delta = delta / 2
    for _ in range(p.refine_iters):
        best, u = _polish(p, objective, u, best)
    return best, u


def _minimize(p: ControlProblem, z: np.ndarray) -> t.Tuple[np.ndarray, np.ndarray]:
    z = np.asarray(z, dtype=float)
    flat = z.reshape(-1, p.d1)
    if p.hamiltonian_fn is not None and p.minimizer_fn is not None:
        values, u = np.asarray(p.hamiltonian_fn(flat), dtype=float), np.asarray(p.minimizer_fn(flat), dtype=float)
    else:
        values, u = np.empty(len(flat)), np.empty(flat.shape)
        for start in range(0, len(flat), SEARCH_CHUNK):
            rows = slice(start, start + SEARCH_CHUNK)
            values[rows], u[rows] = _search(p, flat[rows])
        if p.hamiltonian_fn is not None:
            values = np.asarray(p.hamiltonian_fn(flat), dtype=float)
    return values.reshape(z.shape[:-1]), u.reshape(z.shape)


def hamiltonian(p: ControlProblem, z: np.ndarray) -> np.ndarray:
    """H(z) for z of shape (..., d1); the truncation of the problem applies when set."""
    z = np.asarray(z, dtype=float)
    if p.truncation_M is not None:
        z = cutoff(z, p.truncation_M)
    return _minimize(p, z)[0]


def gamma0(p: ControlProblem, z: np.ndarray) -> np.ndarray:
    """A minimizer selection of Q(u) + z u, ties broken by smallest |u| then lexicographically."""
    return _minimize(p, z)[1]


def cutoff(z: np.ndarray, M: float) -> np.ndarray:
    """rho_M(z) = z chi(|z|): identity for |z| <= M, zero for |z| >= M + 1, C^1 smoothstep blend."""
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    s = np.clip(norms - M, 0.0, 1.0)
    return z * (1.0 - 3.0 * s ** 2 + 2.0 * s ** 3)


def truncate_hamiltonian(p: ControlProblem, M: float) -> ControlProblem:
    if M <= 0:
        raise ValueError(f"M must be positive, got {M}")
    return replace(p, truncation_M=float(M))


def quadratic_hamiltonian(bound: t.Optional[float] = None) -> t.Tuple[HamiltonianFn, HamiltonianFn]:
    """
    Closed forms for Q(u) = |u|^2 / 2: H(z) = -|z|^2 / 2 with minimizer -z, and under |u| <= bound
    -H(z) = Lambda |z| - Lambda^2 / 2 with minimizer -Lambda z / |z| once |z| > Lambda.
    """
    def value(z: np.ndarray) -> np.ndarray:
        norms = np.linalg.norm(z, axis=-1)
        if bound is None:
            return -0.5 * norms ** 2
        return np.where(norms <= bound, -0.5 * norms ** 2, -(bound * norms - 0.5 * bound ** 2))

    def minimizer(z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if bound is None:
            return -z
        norms = np.linalg.norm(z, axis=-1, keepdims=True)
        return np.where(norms <= bound, -z, -bound * z / np.maximum(norms, 1e-300))

    return value, minimizer


def hjb_coefficients(p: ControlProblem, coeffs: CoefficientSet) -> CoefficientSet:
    """Uncontrolled forward coefficients with driver G = -(L + H_M(z)) and terminal Upsilon."""
    def driver(time, x, y, z):
        return -(p.L(time, x) + hamiltonian(p, z))

    return coeffs.replace(
        driver=driver,
        terminal=p.terminal_Upsilon,
        terminal_derivative=None,
        z_bound_K=None,
        name=f"{p.name or coeffs.name}/hjb",
        cache_key=None,
    )


class PolicyField:
    """Feedback u = gamma0(z_hat(t_k, X_k)) built from the Z regressions of an HJB solve."""
    def __init__(self, problem: ControlProblem, solution: BsdeSolution, u_max: float):
        self.problem = problem
        self.solution = solution
        self.u_max = u_max
        ensemble = solution.ensemble
        self.k0 = ensemble.k0
        self.hull = []
        for k in range(ensemble.n_steps):
            rows = solution.basis.matrix(ensemble.state(k))
            self.hull.append((rows.min(axis=0), rows.max(axis=0)))
        self._lock = Lock()
        self._outside = 0
        self._seen = 0

    def z_hat(self, k: int, x: LiftedState) -> np.ndarray:
        return self.solution.predict_z(k, x)

    def control(self, k: int, x: LiftedState) -> np.ndarray:
        """Clamped feedback at local step k."""
        u = gamma0(self.problem, self.z_hat(k, x))
        norms = np.linalg.norm(u, axis=-1, keepdims=True)
        return np.where(norms > self.u_max, u * self.u_max / np.maximum(norms, 1e-300), u)

    def __call__(self, k_abs: int, x: LiftedState, rows: slice) -> np.ndarray:
        k = k_abs - self.k0
        lo, hi = self.hull[k]
        features = self.solution.basis.matrix(x)
        tol = 1e-9 * (1.0 + np.abs(hi - lo))
        outside = np.any((features < lo - tol) | (features > hi + tol), axis=1)
        with self._lock:
            self._outside += int(outside.sum())
            self._seen += len(outside)
        return self.control(k, x)

    def reset_extrapolation(self):
        with self._lock:
            self._outside = 0
            self._seen = 0

    @property
    def extrapolation_fraction(self) -> float:
        return self._outside / self._seen if self._seen else 0.0


@dataclass(frozen=True, eq=False)
class HjbResult:
    value: ValueEstimate
    policy: PolicyField
    solution: BsdeSolution
    M: float
    max_abs_z: float


def solve_hjb(
        p: ControlProblem,
        t0: float,
        x0: LiftedState,
        coeffs: CoefficientSet,
        mc: NoiseSpec,
        basis: t.Optional[RegressionBasis] = None,
        M: t.Optional[float] = None,
        pool: t.Optional[WorkerPool] = None,
    ) -> HjbResult:
    """v(t0, x0) = Y_{t0} of the truncated HJB backward equation; requires max |Z| < M."""
    M = float(CONFIG.get("control", "initial_M", 4.0)) if M is None else float(M)
    truncated = truncate_hamiltonian(p, M)
    ensemble = simulate_forward(coeffs, t0, x0, mc, pool=pool)
    solution = solve_bsde(ensemble, hjb_coefficients(truncated, coeffs), basis)
    max_z = solution.max_abs_z
    if max_z >= M:
        raise ResolveWithLargerM(max_z, M)
    u_max = float(CONFIG.get("control", "u_max_factor", 10.0)) * float(radius_for(p, max_z))
    if p.control_bound is not None:
        u_max = min(u_max, p.control_bound)
    estimate = ValueEstimate(
        solution.y0, solution.std_error, ensemble.n_paths, solution.pathwise,
    )
    return HjbResult(estimate, PolicyField(p, solution, u_max), solution, M, max_z)


def solve_hjb_adaptive(
        p: ControlProblem,
        t0: float,
        x0: LiftedState,
        coeffs: CoefficientSet,
        mc: NoiseSpec,
        basis: t.Optional[RegressionBasis] = None,
        M: t.Optional[float] = None,
        max_resolves: t.Optional[int] = None,
        pool: t.Optional[WorkerPool] = None,
    ) -> HjbResult:
    """solve_hjb, re-solving with a larger truncation level while max |Z| reaches M."""
    state = {"M": float(CONFIG.get("control", "initial_M", 4.0)) if M is None else float(M)}
    attempts = int(CONFIG.get("control", "max_resolves", 5)) if max_resolves is None else max_resolves

    def grow_M(retry_state):
        error = retry_state.outcome.exception()
        state["M"] = max(2.0 * state["M"], 2.0 * error.observed_max_z)
        logger.warning(f"max|Z| = {error.observed_max_z:.4g} reached M; re-solving '{p.name}' with M = {state['M']:.4g}")

    @retry(
        retry=retry_if_exception_type(ResolveWithLargerM),
        stop=stop_after_attempt(attempts),
        before_sleep=grow_M,
        reraise=True,
    )
    def attempt() -> HjbResult:
        return solve_hjb(p, t0, x0, coeffs, mc, basis, state["M"], pool)

    return attempt()


def _check_control(p: ControlProblem, u: np.ndarray, limit: t.Optional[float] = None) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)):
        raise UnboundedControl("control has non-finite values")
    limit = p.control_bound if limit is None else limit
    if limit is not None and np.max(np.linalg.norm(u, axis=-1)) > limit * (1 + 1e-9):
        raise UnboundedControl(f"control exceeds the admissible bound {limit}")
    return u


ControlSpec = t.Union[np.ndarray, t.Sequence[float], t.Callable[[int, LiftedState, slice], np.ndarray]]


def _as_feedback(p: ControlProblem, control: ControlSpec, k0: int) -> t.Callable[[int, LiftedState, slice], np.ndarray]:
    if callable(control):
        return lambda k, x, rows: _check_control(p, control(k, x, rows))
    u = _check_control(p, control)
    if u.ndim == 1:
        return lambda k, x, rows: np.broadcast_to(u, (x.batch_shape[0], p.d1))
    # Per-path per-step array of shape (P, K, d1).
    return lambda k, x, rows: u[rows, k - k0]


def running_costs(p: ControlProblem, ensemble: ForwardEnsemble) -> np.ndarray:
    """Per path int (L + Q(u)) ds + Upsilon(X_T) along a controlled ensemble."""
    dt = ensemble.grid.dt
    total = np.asarray(p.terminal_Upsilon(ensemble.terminal_state()), dtype=float).copy()
    for k in range(ensemble.n_steps):
        total += dt * (p.L(ensemble.time(k), ensemble.state(k)) + p.Q(ensemble.controls[:, k]))
    return total


def _estimate(samples: np.ndarray) -> ValueEstimate:
    return ValueEstimate(float(samples.mean()), float(np.std(samples, ddof=1) / np.sqrt(len(samples))), len(samples), samples)


def cost(
        p: ControlProblem,
        t0: float,
        x0: LiftedState,
        control: ControlSpec,
        coeffs: CoefficientSet,
        mc: NoiseSpec,
        pool: t.Optional[WorkerPool] = None,
    ) -> ValueEstimate:
    """J(t0, x0, u) on the controlled forward equation (drift b + sigma u)."""
    k0 = mc.grid.index_of(t0)
    ensemble = simulate_forward(coeffs, t0, x0, mc, control=_as_feedback(p, control, k0), pool=pool)
    return _estimate(running_costs(p, ensemble))


@dataclass(frozen=True, eq=False)
class ClosedLoopResult:
    ensemble: ForwardEnsemble
    cost: ValueEstimate
    extrapolation_fraction: float


def closed_loop(
        p: ControlProblem,
        t0: float,
        x0: LiftedState,
        policy: PolicyField,
        coeffs: CoefficientSet,
        mc_fresh: NoiseSpec,
        pool: t.Optional[WorkerPool] = None,
    ) -> ClosedLoopResult:
    """Simulate with u = gamma0(z_hat(t_k, X_k)) on fresh noise and return the realized cost."""
    if not np.any(coeffs.sigma):
        raise DegenerateNoise("sigma vanishes: the control channel is degenerate")
    training = policy.solution.ensemble.noise
    if training is not None and training.seed == mc_fresh.seed:
        raise ValueError(f"closed-loop evaluation needs a seed different from the training seed {training.seed}")
    if mc_fresh.grid.index_of(t0) != policy.k0:
        raise ValueError(f"policy was fitted from step {policy.k0}, not from t0={t0}")
    policy.reset_extrapolation()
    ensemble = simulate_forward(coeffs, t0, x0, mc_fresh, control=policy, pool=pool)
    fraction = policy.extrapolation_fraction
    if fraction > 0:
        message = f"{fraction:.2%} of closed-loop feature rows left the training hull"
        logger.warning(message)
        warnings.warn(message, PolicyExtrapolation)
    return ClosedLoopResult(ensemble, _estimate(running_costs(p, ensemble)), fraction)


@dataclass(frozen=True)
class AuditResult:
    v: float
    cost: float
    gap: float
    gap_std_error: float
    relation_residual: float
    relation_std_error: float


def fundamental_relation_audit(
        p: ControlProblem,
        t0: float,
        x0: LiftedState,
        control: ControlSpec,
        v_field: HjbResult,
        coeffs: CoefficientSet,
        mc: NoiseSpec,
        pool: t.Optional[WorkerPool] = None,
    ) -> AuditResult:
    """
    gap = E int [H(z_hat) - z_hat u - Q(u)] ds along the controlled flow, which is <= 0 for every
    control and 0 at u = gamma0(z_hat); the relation residual v - J - gap should vanish.
    """
    k0 = mc.grid.index_of(t0)
    feedback = control if isinstance(control, PolicyField) else _as_feedback(p, control, k0)
    ensemble = simulate_forward(coeffs, t0, x0, mc, control=feedback, pool=pool)
    dt = ensemble.grid.dt
    policy = v_field.policy
    gaps = np.zeros(ensemble.n_paths)
    for k in range(ensemble.n_steps):
        z = policy.z_hat(k, ensemble.state(k))
        u = ensemble.controls[:, k]
        gaps += dt * (hamiltonian(p, z) - np.sum(z * u, axis=-1) - p.Q(u))
    costs = running_costs(p, ensemble)
    gap = _estimate(gaps)
    combined = _estimate(costs + gaps)
    residual = v_field.value.mean - combined.mean
    relation_se = float(np.sqrt(v_field.value.std_error ** 2 + combined.std_error ** 2))
    return AuditResult(v_field.value.mean, float(costs.mean()), gap.mean, gap.std_error, residual, relation_se)


def gamma0_discontinuity(p: ControlProblem, lines: t.Optional[np.ndarray] = None, radius: float = 5.0, n_points: int = 201) -> float:
    """Largest |gamma0(z_{i+1}) - gamma0(z_i)| / |z_{i+1} - z_i| along lines through the origin."""
    lines = np.eye(p.d1) if lines is None else np.atleast_2d(np.asarray(lines, dtype=float))
    s = np.linspace(-radius, radius, n_points)
    worst = 0.0
    for direction in lines:
        z = s[:, None] * direction[None, :]
        u = gamma0(p, z)
        ratio = np.linalg.norm(np.diff(u, axis=0), axis=1) / np.linalg.norm(np.diff(z, axis=0), axis=1)
        worst = max(worst, float(ratio.max()))
    return worst
