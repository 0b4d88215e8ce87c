"""
Boundary-shifted mollification of the past segment, J^n(y, phi) = (y, J^n phi) with
J^n phi(r) = int rho_n(tau_{1/n}(r) - s) phi(s) ds, and the diagnostics around it.
"""
import typing as t
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import pandas as pd
from scipy.integrate import quad
from scipy.special import roots_legendre

from common.colors import get_logger
from common.config import CONFIG
from common.errors import BandwidthTooWide, EpsOutOfRange
from segment import LiftedState, PathGrid, sup_norm
from forward import CoefficientSet

logger = get_logger(__name__)


def bump(s: np.ndarray) -> np.ndarray:
    """exp(-1 / (1 - s^2)) on (-1, 1), zero outside; unnormalized."""
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1
    out[inside] = np.exp(-1.0 / (1.0 - s[inside] ** 2))
    return out


@dataclass(frozen=True)
class MollifierConfig:
    n: int
    quadrature_points: int = 64

    @staticmethod
    def from_config(n: int) -> "MollifierConfig":
        return MollifierConfig(n, int(CONFIG.get("mollifier", "quadrature_points", 64)))

    @property
    def bandwidth(self) -> float:
        return 1.0 / self.n

    @property
    def bump_normalization(self) -> float:
        return _bump_integral()

    def kernel(self, x: np.ndarray) -> np.ndarray:
        """rho_n(x) = n rho(n x)."""
        return self.n * bump(self.n * np.asarray(x, dtype=float)) / self.bump_normalization

    def mass(self) -> float:
        """int rho_n on its support, by a Gauss-Legendre rule four times finer than the convolution's."""
        nodes, weights = roots_legendre(4 * self.quadrature_points)
        return float(np.sum(weights * self.kernel(nodes / self.n)) / self.n)


@lru_cache(maxsize=1)
def _bump_integral() -> float:
    """int bump over (-1, 1) by adaptive quadrature."""
    value, _ = quad(lambda s: float(bump(s)), -1.0, 1.0, epsabs=1e-15, epsrel=1e-13, limit=200)
    return float(value)


def tau_eps(r: t.Union[float, np.ndarray], eps: float, horizon_T: float) -> np.ndarray:
    """Clamp to [-T + eps, -eps]."""
    if not 0 < eps < horizon_T / 2:
        raise EpsOutOfRange(f"eps={eps} outside (0, T/2) for T={horizon_T}")
    out = np.clip(np.asarray(r, dtype=float), -horizon_T + eps, -eps)
    return float(out) if out.ndim == 0 else out


@lru_cache(maxsize=64)
def _weight_matrix(n: int, quadrature_points: int, horizon_T: float, n_steps: int) -> np.ndarray:
    grid = PathGrid(horizon_T, n_steps)
    cfg = MollifierConfig(n, quadrature_points)
    nodes, weights = roots_legendre(quadrature_points)
    kernel_weights = weights * bump(nodes)
    kernel_weights = kernel_weights / kernel_weights.sum()
    centers = tau_eps(grid.past_times(), cfg.bandwidth, horizon_T)
    points = centers[:, None] + nodes[None, :] / n
    slots = grid.past_index(points)
    W = np.zeros((n_steps, n_steps))
    rows = np.repeat(np.arange(n_steps), quadrature_points)
    np.add.at(W, (rows, slots.reshape(-1)), np.tile(kernel_weights, n_steps))
    W.setflags(write=False)
    return W


def weight_matrix(cfg: MollifierConfig, grid: PathGrid) -> np.ndarray:
    """N x N quadrature matrix of J^n against the piecewise-constant interpolant of the past."""
    if cfg.bandwidth >= grid.horizon_T / 2:
        raise BandwidthTooWide(f"1/n = {cfg.bandwidth} is not below T/2 = {grid.horizon_T / 2}")
    return _weight_matrix(cfg.n, cfg.quadrature_points, grid.horizon_T, grid.n_steps)


def apply_Jn(x: LiftedState, cfg: MollifierConfig) -> LiftedState:
    W = weight_matrix(cfg, x.grid)
    past = np.einsum("ij,...jd->...id", W, x.past)
    return LiftedState(x.present, past, x.grid)


def smoothness_ok(x: LiftedState, smoothed: LiftedState, cfg: MollifierConfig) -> bool:
    """Largest adjacent difference of the smoothed past is at most 2 n dt sup_norm(x)."""
    jumps = np.abs(np.diff(smoothed.past, axis=-2)).max()
    return bool(jumps <= 2 * cfg.n * x.grid.dt * np.max(sup_norm(x)) + 1e-12)


def jump_path(grid: PathGrid, a: float, d: int = 1, present: float = 1.0) -> LiftedState:
    """(present, 1_{[a, 0)}) in every coordinate."""
    past = (grid.past_times() >= a - 1e-12).astype(float)
    return LiftedState(np.full(d, present), np.repeat(past[:, None], d, axis=1), grid)


def default_jump_points(grid: PathGrid, count: int = 5, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.sort(rng.uniform(-0.9 * grid.horizon_T, -0.1 * grid.horizon_T, size=count))


def smoothing_report(
        x: LiftedState,
        n_list: t.Sequence[int],
        jump_points: t.Optional[t.Sequence[float]] = None,
        quadrature_points: t.Optional[int] = None,
    ) -> pd.DataFrame:
    """Per n: sup-norm error of J^n x and the operator-norm proxy over one-jump paths."""
    if list(n_list) != sorted(set(n_list)):
        raise ValueError(f"n_list must be strictly increasing, got {list(n_list)}")
    jump_points = default_jump_points(x.grid) if jump_points is None else jump_points
    jumps = [jump_path(x.grid, a, x.d, present=0.0) for a in jump_points]
    rows = []
    for n in n_list:
        cfg = MollifierConfig(n, quadrature_points or MollifierConfig.from_config(n).quadrature_points)
        smoothed = apply_Jn(x, cfg)
        ratios = [sup_norm(apply_Jn(p, cfg)) / sup_norm(p) for p in jumps]
        scale = sup_norm(x)
        rows.append({
            "n": n,
            "sup_error": sup_norm(smoothed - x),
            "boundedness_ratio": max(ratios),
            "state_ratio": sup_norm(smoothed) / scale if scale > 0 else 1.0,
            "smooth": smoothness_ok(x, smoothed, cfg),
        })
    report = pd.DataFrame(rows)
    if not report["sup_error"].is_monotonic_decreasing:
        logger.warning(f"J^n errors are not decreasing over n={list(n_list)}: {report['sup_error'].tolist()}")
    return report


def approximate_coefficients(
        coeffs: CoefficientSet,
        cfg: MollifierConfig,
        driver_cfg: t.Optional[MollifierConfig] = None,
        terminal_cfg: t.Optional[MollifierConfig] = None,
    ) -> CoefficientSet:
    """
    B^n = B(J^n .), G^n = G(., J^n ., ., .), Phi^n = Phi(J^n .); constants carried over unchanged.
    G and Phi follow cfg unless given their own smoothing sequence.
    """
    driver_cfg = driver_cfg or cfg
    terminal_cfg = terminal_cfg or cfg
    J = lambda x: apply_Jn(x, cfg)
    JG = lambda x: apply_Jn(x, driver_cfg)
    JP = lambda x: apply_Jn(x, terminal_cfg)
    suffix = f"J{cfg.n}"
    if (driver_cfg.n, terminal_cfg.n) != (cfg.n, cfg.n):
        suffix += f"-G{driver_cfg.n}-P{terminal_cfg.n}"
    changes: t.Dict[str, t.Any] = {
        "drift": None,
        "state_drift": None,
        "drift_derivative": None,
        "terminal": lambda x: coeffs.Phi(JP(x)),
        "terminal_derivative": None,
        "name": f"{coeffs.name}/{suffix}",
        "cache_key": f"{coeffs.cache_key}/{suffix}" if coeffs.cache_key is not None else None,
    }
    if coeffs.drift is not None or coeffs.state_drift is not None:
        changes["state_drift"] = lambda time, x: coeffs.b(time, J(x))
    if coeffs.drift_derivative is not None:
        changes["drift_derivative"] = lambda time, x, h: coeffs.db(time, J(x), J(h))
    if coeffs.driver is not None:
        changes["driver"] = lambda time, x, y, z: coeffs.G(time, JG(x), y, z)
    if coeffs.terminal_derivative is not None:
        changes["terminal_derivative"] = lambda x, h: coeffs.dPhi(JP(x), JP(h))
    return coeffs.replace(**changes)


def one_jump_gap(
        coeffs: CoefficientSet,
        y: LiftedState,
        n_list: t.Sequence[int],
        jump_points: t.Optional[t.Sequence[float]] = None,
        time: float = 0.0,
    ) -> pd.DataFrame:
    """|D Phi(y)[J^n h - h]| and |DB(t, y)[J^n h - h]| for h = (1, 1_{[a, 0)})."""
    jump_points = default_jump_points(y.grid) if jump_points is None else jump_points
    single = y.broadcast(1)
    rows = []
    for n in n_list:
        cfg = MollifierConfig.from_config(n)
        for a in jump_points:
            h = jump_path(y.grid, a, y.d)
            diff = (apply_Jn(h, cfg) - h).broadcast(1)
            rows.append({
                "n": n,
                "a": float(a),
                "phi_gap": float(abs(coeffs.dPhi(single, diff)[0])),
                "b_gap": float(np.linalg.norm(coeffs.db(time, single, diff)[0])),
            })
    return pd.DataFrame(rows)

