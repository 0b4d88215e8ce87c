"""
Problem data of the forward-backward system: drift b (or its lifted form B), additive noise
sigma, driver G and terminal cost Phi, with the growth/Lipschitz metadata they were declared with.

Callables receive batches: states carry a leading path axis, y is (P,), z is (P, d1).
Missing derivatives fall back to central finite differences with step 1e-6 * (1 + |.|).
"""
import typing as t
from dataclasses import dataclass

import numpy as np

from common.colors import get_logger
from common.errors import CoefficientEvaluation, DriverEvaluation
from segment import LiftedState, SampledPath, restrict, sup_norm

logger = get_logger(__name__)

FD_REL_STEP = 1e-6

DriftFn = t.Callable[[float, SampledPath], np.ndarray]
StateDriftFn = t.Callable[[float, LiftedState], np.ndarray]
DriftDerivativeFn = t.Callable[[float, LiftedState, LiftedState], np.ndarray]
DriverFn = t.Callable[[float, LiftedState, np.ndarray, np.ndarray], np.ndarray]
TerminalFn = t.Callable[[LiftedState], np.ndarray]
TerminalDerivativeFn = t.Callable[[LiftedState, LiftedState], np.ndarray]


def _fd_step(scale: t.Union[float, np.ndarray]) -> float:
    return FD_REL_STEP * (1.0 + float(np.max(np.abs(scale))))


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    sigma: np.ndarray
    terminal: TerminalFn
    drift: t.Optional[DriftFn] = None
    # Lifted B(t, x) evaluated on the state directly; takes precedence over drift.
    state_drift: t.Optional[StateDriftFn] = None
    drift_derivative: t.Optional[DriftDerivativeFn] = None
    # None means G == 0.
    driver: t.Optional[DriverFn] = None
    terminal_derivative: t.Optional[TerminalDerivativeFn] = None
    growth_m: int = 1
    lipschitz_C: float = 1.0
    # Declared product of the bounds on D Phi, D1 G, D2 G; enables the |Z| <= K |sigma| check.
    z_bound_K: t.Optional[float] = None
    name: str = ""
    cache_key: t.Optional[str] = None

    def __post_init__(self):
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        sigma.setflags(write=False)
        object.__setattr__(self, "sigma", sigma)
        if self.lipschitz_C <= 0:
            raise ValueError(f"lipschitz_C must be positive, got {self.lipschitz_C}")

    @property
    def d(self) -> int:
        return self.sigma.shape[0]

    @property
    def d1(self) -> int:
        return self.sigma.shape[1]

    @property
    def driver_is_zero(self) -> bool:
        return self.driver is None

    @property
    def sigma_norm(self) -> float:
        return float(np.linalg.norm(self.sigma, 2))

    def replace(self, **changes) -> "CoefficientSet":
        fields = {name: getattr(self, name) for name in self.__dataclass_fields__}
        fields.update(changes)
        return CoefficientSet(**fields)

    def b(self, time: float, x: LiftedState) -> np.ndarray:
        """Present component of B(t, x), shape batch + (d,)."""
        if self.state_drift is not None:
            out = np.asarray(self.state_drift(time, x), dtype=float)
        elif self.drift is not None:
            out = np.asarray(self.drift(time, restrict(x, time)), dtype=float)
        else:
            return np.zeros(x.present.shape)
        out = np.broadcast_to(out, x.present.shape)
        if not np.all(np.isfinite(out)):
            raise CoefficientEvaluation(f"drift of '{self.name}' is not finite at t={time}")
        return out

    def db(self, time: float, x: LiftedState, h: LiftedState) -> np.ndarray:
        """Directional derivative DB(t, x)[h], present component."""
        if self.drift_derivative is not None:
            out = np.asarray(self.drift_derivative(time, x, h), dtype=float)
            return np.broadcast_to(out, x.present.shape)
        if self.drift is None and self.state_drift is None:
            return np.zeros(x.present.shape)
        eps = _fd_step(sup_norm(x))
        return (self.b(time, x + eps * h) - self.b(time, x - eps * h)) / (2 * eps)

    def G(self, time: float, x: LiftedState, y: np.ndarray, z: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if self.driver is None:
            return np.zeros(y.shape)
        out = np.broadcast_to(np.asarray(self.driver(time, x, y, z), dtype=float), y.shape)
        if not np.all(np.isfinite(out)):
            raise DriverEvaluation(f"driver of '{self.name}' is not finite at t={time}")
        return out

    def G_partials(
            self, time: float, x: LiftedState, y: np.ndarray, z: np.ndarray, h: LiftedState
        ) -> t.Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(D1 G[h], D2 G, D3 G) by central differences; shapes (P,), (P,), (P, d1)."""
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        if self.driver is None:
            return np.zeros(y.shape), np.zeros(y.shape), np.zeros(z.shape)
        eps_x = _fd_step(sup_norm(x))
        dx = (self.G(time, x + eps_x * h, y, z) - self.G(time, x - eps_x * h, y, z)) / (2 * eps_x)
        eps_y = _fd_step(y)
        dy = (self.G(time, x, y + eps_y, z) - self.G(time, x, y - eps_y, z)) / (2 * eps_y)
        eps_z = _fd_step(z)
        dz = np.empty(z.shape)
        for j in range(z.shape[-1]):
            bump = np.zeros(z.shape[-1])
            bump[j] = eps_z
            dz[..., j] = (self.G(time, x, y, z + bump) - self.G(time, x, y, z - bump)) / (2 * eps_z)
        return dx, dy, dz

    def Phi(self, x: LiftedState) -> np.ndarray:
        out = np.broadcast_to(np.asarray(self.terminal(x), dtype=float), x.batch_shape)
        if not np.all(np.isfinite(out)):
            raise CoefficientEvaluation(f"terminal cost of '{self.name}' is not finite")
        return out

    def dPhi(self, x: LiftedState, h: LiftedState) -> np.ndarray:
        if self.terminal_derivative is not None:
            return np.broadcast_to(np.asarray(self.terminal_derivative(x, h), dtype=float), x.batch_shape)
        eps = _fd_step(sup_norm(x))
        return (self.Phi(x + eps * h) - self.Phi(x - eps * h)) / (2 * eps)


def check_coefficients(
        coeffs: CoefficientSet, states: LiftedState, time: float = 0.0, seed: int = 0
    ) -> t.Dict[str, t.Any]:
    """
    Spot check of the declared metadata on a batch of states: |b| <= C (1 + |x|) and
    |G(y1, z1) - G(y2, z2)| <= C (|y1 - y2| + |z1 - z2|) on random (y, z) pairs.
    """
    rng = np.random.default_rng(seed)
    C = coeffs.lipschitz_C
    norms = np.atleast_1d(sup_norm(states))
    growth_ratio = np.linalg.norm(coeffs.b(time, states), axis=-1) / (1.0 + norms)
    n = states.batch_shape[0]
    y1, y2 = rng.normal(size=(2, n))
    z1, z2 = rng.normal(size=(2, n, coeffs.d1))
    gap = np.abs(coeffs.G(time, states, y1, z1) - coeffs.G(time, states, y2, z2))
    dist = np.abs(y1 - y2) + np.linalg.norm(z1 - z2, axis=-1)
    lipschitz_ratio = gap / dist
    report = {
        "drift_growth_ratio": float(growth_ratio.max()),
        "driver_lipschitz_ratio": float(lipschitz_ratio.max()),
        "drift_growth_ok": bool(growth_ratio.max() <= C),
        "driver_lipschitz_ok": bool(lipschitz_ratio.max() <= C * (1 + 1e-6)),
    }
    if not (report["drift_growth_ok"] and report["driver_lipschitz_ok"]):
        logger.warning(f"Coefficient set '{coeffs.name}' exceeds its declared constant C={C}: {report}")
    return report
