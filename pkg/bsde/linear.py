"""
Linear BSDE -dY = (a Y + b Z + c) ds - Z dW, Y_T = eta, solved through the exponential weight
Gamma_t = exp(int (a - |b|^2 / 2) ds + int b dW): Y_t = Gamma_t^{-1} E[Gamma_T eta + int_t^T Gamma_s c_s ds | F_t].
"""
import typing as t
from dataclasses import dataclass

import numpy as np

from common.colors import get_logger
from common.errors import UnboundedCoefficient
from forward import NoiseSpec, increments
from bsde.regression import regress

logger = get_logger(__name__)


def _frozen(values: np.ndarray) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LinearBsdeSpec:
    """Per-path coefficient processes on the steps of [t0, T]: a, c of shape (P, K), b of shape (P, K, d1), eta (P,)."""
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    eta: np.ndarray
    a_bound: float = np.inf
    b_bound: float = np.inf

    def __post_init__(self):
        for name in ("a", "b", "c", "eta"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        if self.b.ndim == 2:
            object.__setattr__(self, "b", _frozen(self.b[..., None]))
        if self.a.shape != self.c.shape or self.a.shape != self.b.shape[:2] or self.eta.shape != self.a.shape[:1]:
            raise ValueError(f"inconsistent shapes a={self.a.shape} b={self.b.shape} c={self.c.shape} eta={self.eta.shape}")

    @staticmethod
    def constant(a: float, b: t.Sequence[float], c: float, eta: float, n_paths: int, n_steps: int, **bounds) -> "LinearBsdeSpec":
        b = np.atleast_1d(np.asarray(b, dtype=float))
        return LinearBsdeSpec(
            a=np.full((n_paths, n_steps), a),
            b=np.broadcast_to(b, (n_paths, n_steps, len(b))),
            c=np.full((n_paths, n_steps), c),
            eta=np.full(n_paths, eta),
            **bounds,
        )

    @property
    def n_paths(self) -> int:
        return self.a.shape[0]

    @property
    def n_steps(self) -> int:
        return self.a.shape[1]

    @property
    def is_deterministic(self) -> bool:
        return all(np.all(v == v[:1]) for v in (self.a, self.b, self.c, self.eta))

    def check_bounds(self):
        if np.max(np.abs(self.a)) > self.a_bound:
            raise UnboundedCoefficient(f"|a| = {np.max(np.abs(self.a)):.6g} exceeds its bound {self.a_bound}")
        if np.max(np.linalg.norm(self.b, axis=-1)) > self.b_bound:
            raise UnboundedCoefficient(f"|b| exceeds its bound {self.b_bound}")

    def gamma(self, dW: np.ndarray, dt: float) -> np.ndarray:
        """Gamma on the step grid by log-Euler accumulation, shape (P, K + 1), Gamma_0 = 1."""
        log_steps = (self.a - 0.5 * np.sum(self.b ** 2, axis=-1)) * dt + np.sum(self.b * dW, axis=-1)
        log_gamma = np.concatenate([np.zeros((self.n_paths, 1)), np.cumsum(log_steps, axis=1)], axis=1)
        return np.exp(log_gamma)

    def weight_V(self, dt: float, p: float = 2.0) -> np.ndarray:
        """V_t = int |a| ds + int |b|^2 ds / (1 ^ (p - 1)), nondecreasing, shape (P, K + 1)."""
        rate = np.abs(self.a) + np.sum(self.b ** 2, axis=-1) / min(1.0, p - 1.0)
        return np.concatenate([np.zeros((self.n_paths, 1)), np.cumsum(rate * dt, axis=1)], axis=1)

    def driver(self) -> t.Callable:
        """G(s, x, y, z) = -(a y + b z + c) for constant coefficients."""
        if not all(np.all(v == v.flat[0]) for v in (self.a, self.c)) or not np.all(self.b == self.b[0, 0]):
            raise ValueError("driver() is only defined for constant coefficients")
        a, b, c = float(self.a[0, 0]), self.b[0, 0].copy(), float(self.c[0, 0])
        return lambda s, x, y, z: -(a * y + z @ b + c)


def _deterministic_solution(spec: LinearBsdeSpec, dt: float) -> np.ndarray:
    a, c, eta = spec.a[0], spec.c[0], spec.eta[0]
    n_steps = spec.n_steps
    y = np.empty(n_steps + 1)
    y[n_steps] = eta
    for k in reversed(range(n_steps)):
        # Left Riemann sum for int Gamma c ds, exact exponential for the a-part.
        y[k] = np.exp(a[k] * dt) * y[k + 1] + c[k] * dt
    return np.broadcast_to(y, (spec.n_paths, n_steps + 1)).copy()


def linear_bsde_closed_form(
        spec: LinearBsdeSpec,
        noise: NoiseSpec,
        t0: float = 0.0,
        features: t.Optional[np.ndarray] = None,
        degree: int = 2,
    ) -> np.ndarray:
    """
    Y on the steps of [t0, T], shape (P, K + 1). Deterministic coefficients give a deterministic Y;
    otherwise the conditional expectations are regressions on (W_k, log Gamma_k) and any extra
    per-step features of shape (P, K + 1, m).
    """
    spec.check_bounds()
    grid, dt = noise.grid, noise.grid.dt
    k0 = grid.index_of(t0)
    if spec.n_steps != grid.n_steps - k0 or spec.n_paths != noise.n_paths:
        raise ValueError(f"linear BSDE has {spec.n_paths} paths x {spec.n_steps} steps, noise implies {noise.n_paths} x {grid.n_steps - k0}")
    if spec.is_deterministic:
        return _deterministic_solution(spec, dt)

    dW = increments(noise, steps=range(k0, grid.n_steps))
    gamma = spec.gamma(dW, dt)
    W = np.concatenate([np.zeros((spec.n_paths, 1, noise.d1)), np.cumsum(dW, axis=1)], axis=1)
    n_steps = spec.n_steps
    Y = np.empty((spec.n_paths, n_steps + 1))
    weighted = gamma[:, n_steps] * spec.eta
    Y[:, n_steps] = spec.eta
    for k in reversed(range(n_steps)):
        weighted = weighted + gamma[:, k] * spec.c[:, k] * dt
        rows = np.concatenate([W[:, k], np.log(gamma[:, k])[:, None]], axis=1)
        if features is not None:
            rows = np.concatenate([rows, features[:, k]], axis=1)
        Y[:, k] = regress(rows, weighted, degree).fitted / gamma[:, k]
    logger.info(f"Linear BSDE by nested regression: Y0 = {Y[:, 0].mean():.6g}")
    return Y
