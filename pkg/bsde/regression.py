"""
Least-squares regression on path features, the conditional expectation used by the backward solvers.
"""
import typing as t
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from sklearn.preprocessing import PolynomialFeatures

from common.colors import get_logger
from common.config import CONFIG
from common.errors import InsufficientSamples, SingularDesign
from segment import LiftedState, PathGrid

logger = get_logger(__name__)

SAMPLES_PER_FEATURE = 5


@dataclass(frozen=True)
class Feature:
    """A named path functional; fn maps a batch of states to (P,)."""
    name: str
    fn: t.Callable[[LiftedState], np.ndarray]


def present_features(d: int) -> t.List[Feature]:
    return [Feature(f"present_{j}", lambda x, j=j: x.present[..., j]) for j in range(d)]


def lag_features(grid: PathGrid, d: int, lags: t.Sequence[t.Union[str, float]]) -> t.List[Feature]:
    """Past values at fixed lags; "dt" is one grid step, numbers are fractions of T."""
    slots = []
    for lag in lags:
        steps = 1 if lag == "dt" else int(round(float(lag) * grid.n_steps))
        slot = grid.n_steps - min(max(steps, 1), grid.n_steps)
        if slot not in slots:
            slots.append(slot)
    return [
        Feature(f"past_{slot}_{j}", lambda x, slot=slot, j=j: x.past[..., slot, j])
        for slot in slots for j in range(d)
    ]


def running_average_features(d: int) -> t.List[Feature]:
    return [Feature(f"average_{j}", lambda x, j=j: x.past[..., :, j].mean(axis=-1)) for j in range(d)]


@dataclass(frozen=True)
class RegressionBasis:
    features: t.Tuple[Feature, ...]
    degree: int = 2
    ridge_lambda: float = 1e-8

    @staticmethod
    def default(grid: PathGrid, d: int, degree: t.Optional[int] = None, ridge_lambda: t.Optional[float] = None) -> "RegressionBasis":
        """Present coordinates, past at lags {dt, T/4, T/2, T} and the running average of the past."""
        cfg = CONFIG.section("basis")
        features = present_features(d) + lag_features(grid, d, cfg.get("lags", ["dt", 0.25, 0.5, 1.0]))
        if cfg.get("running_average", True):
            features += running_average_features(d)
        return RegressionBasis(
            tuple(features),
            degree if degree is not None else int(cfg.get("degree", 2)),
            ridge_lambda if ridge_lambda is not None else float(cfg.get("ridge_lambda", 1e-8)),
        )

    @staticmethod
    def present_only(d: int, degree: int = 1, ridge_lambda: float = 1e-8) -> "RegressionBasis":
        return RegressionBasis(tuple(present_features(d)), degree, ridge_lambda)

    @property
    def names(self) -> t.List[str]:
        return [f.name for f in self.features]

    def matrix(self, x: LiftedState) -> np.ndarray:
        """Feature rows, shape (P, n_features)."""
        return np.stack([np.asarray(f.fn(x), dtype=float) for f in self.features], axis=-1)

    def describe(self) -> t.Dict[str, t.Any]:
        return {"features": self.names, "degree": self.degree, "ridge_lambda": self.ridge_lambda}


@dataclass(frozen=True, eq=False)
class RegressionFit:
    coef: np.ndarray
    fitted: np.ndarray
    r2: np.ndarray
    condition: float
    rank: int
    n_samples: int
    poly: t.Optional[PolynomialFeatures] = None
    scale: t.Optional[np.ndarray] = None
    mean_only: bool = False

    @property
    def dimension(self) -> int:
        return 1 if self.mean_only else len(self.scale)

    def predict(self, rows: np.ndarray) -> np.ndarray:
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        if self.mean_only:
            return np.broadcast_to(self.coef, (rows.shape[0],) + self.coef.shape[1:]).copy()
        return (self.poly.transform(rows) / self.scale) @ self.coef

    def diagnostics(self) -> t.Dict[str, t.Any]:
        return {
            "r2": np.atleast_1d(self.r2).tolist(),
            "condition": self.condition,
            "rank": self.rank,
            "dimension": self.dimension,
        }


def _r2(targets: np.ndarray, fitted: np.ndarray) -> np.ndarray:
    ss_res = np.sum((targets - fitted) ** 2, axis=0)
    ss_tot = np.sum((targets - targets.mean(axis=0)) ** 2, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(ss_tot > 0, 1.0 - ss_res / np.where(ss_tot > 0, ss_tot, 1.0), 1.0)


def regress(
        samples: np.ndarray,
        targets: np.ndarray,
        degree: int = 2,
        ridge_lambda: float = 1e-8,
    ) -> RegressionFit:
    """
    Polynomial least squares of targets on feature rows. Columns are scaled to unit RMS and
    singular values below sqrt(ridge_lambda) times the largest are dropped. When every row is
    identical the conditional expectation is unconditioned and the fit is the plain mean.
    Targets may be (n,) or (n, q).
    """
    targets = np.asarray(targets, dtype=float)
    n = targets.shape[0]
    rows = np.asarray(samples, dtype=float).reshape(n, -1)
    if rows.shape[1] == 0 or np.all(rows == rows[:1]):
        if n < SAMPLES_PER_FEATURE:
            raise InsufficientSamples(f"{n} samples for a constant fit")
        mean = targets.mean(axis=0, keepdims=True)
        fitted = np.broadcast_to(mean, targets.shape).copy()
        return RegressionFit(
            coef=mean, fitted=fitted, r2=_r2(targets, fitted), condition=1.0, rank=1, n_samples=n, mean_only=True,
        )
    poly = PolynomialFeatures(degree=degree, include_bias=True).fit(rows)
    design = poly.transform(rows)
    dim = design.shape[1]
    if n < SAMPLES_PER_FEATURE * dim:
        raise InsufficientSamples(f"{n} samples for {dim} basis functions, need {SAMPLES_PER_FEATURE * dim}")
    scale = np.sqrt(np.mean(design ** 2, axis=0))
    scale[scale == 0] = 1.0
    design = design / scale
    coef, _, rank, singular = scipy.linalg.lstsq(design, targets, cond=np.sqrt(ridge_lambda))
    if rank == 0 or not np.all(np.isfinite(coef)):
        raise SingularDesign(f"design of shape {design.shape} has rank {rank}")
    condition = float(singular[0] / singular[rank - 1])
    if rank < dim:
        logger.debug(f"Regression design kept rank {rank} of {dim}, condition {condition:.3e}")
    fitted = design @ coef
    return RegressionFit(
        coef=coef, fitted=fitted, r2=_r2(targets, fitted), condition=condition, rank=int(rank),
        n_samples=n, poly=poly, scale=scale,
    )


def fit_basis(basis: RegressionBasis, x: LiftedState, targets: np.ndarray) -> RegressionFit:
    return regress(basis.matrix(x), targets, basis.degree, basis.ridge_lambda)
