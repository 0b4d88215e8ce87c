"""
Backward regression solver for Y_s + int_s^T Z dW = -int_s^T G dr + Phi(X_T) on a forward ensemble,
and the linear BSDE satisfied by its first directional derivative.
"""
import json
import typing as t
from dataclasses import dataclass

import numpy as np
import pandas as pd

from common.colors import get_logger
from common.config import CONFIG
from common.errors import InsufficientSamples, RegressionFailure, SingularDesign
from forward import CoefficientSet, ForwardEnsemble, Trajectories
from segment import LiftedState
from bsde.regression import RegressionBasis, RegressionFit, regress

logger = get_logger(__name__)

EXPLICIT = "explicit"
PICARD = "picard"
DEFAULT_PICARD_ITERATIONS = 2
Z_BOUND_SLACK = 1.2


@dataclass(frozen=True)
class StepFits:
    y: RegressionFit
    z: RegressionFit


def _fit_step(step: int, rows: np.ndarray, target_next: np.ndarray, dW: np.ndarray, dt: float, basis: RegressionBasis):
    """Y-hat = E[Y_{k+1} | X_k] and Z = E[(Y_{k+1} - Y-hat) dW_k | X_k] / dt."""
    try:
        fit_y = regress(rows, target_next, basis.degree, basis.ridge_lambda)
        centred = (target_next - fit_y.fitted)[:, None] * dW
        fit_z = regress(rows, centred, basis.degree, basis.ridge_lambda)
    except (InsufficientSamples, SingularDesign) as e:
        raise RegressionFailure(step, e) from e
    return StepFits(fit_y, fit_z), fit_y.fitted, fit_z.fitted / dt


@dataclass(frozen=True, eq=False)
class BsdeSolution:
    """
    Y has shape (P, K + 1), Z and driver_values (the G actually applied at each step) have K
    columns; fits[k] holds the step-k regressions.
    """
    ensemble: ForwardEnsemble
    coefficients: CoefficientSet
    basis: RegressionBasis
    Y: np.ndarray
    Z: np.ndarray
    fits: t.Tuple[StepFits, ...]
    pathwise: np.ndarray
    driver_values: np.ndarray
    scheme: str = EXPLICIT
    picard_iterations: int = 0

    @property
    def y0(self) -> float:
        return float(np.mean(self.Y[:, 0]))

    @property
    def std_error(self) -> float:
        """MC standard error of Y_{t0} from the pathwise estimator Phi(X_T) - sum dt G."""
        return float(np.std(self.pathwise, ddof=1) / np.sqrt(len(self.pathwise)))

    @property
    def z0(self) -> np.ndarray:
        return self.Z[:, 0].mean(axis=0)

    @property
    def max_abs_z(self) -> float:
        return float(np.linalg.norm(self.Z, axis=-1).max())

    def predict_z(self, k: int, x: LiftedState) -> np.ndarray:
        """Fitted decoupling field Du Sigma at local step k, shape (P, d1)."""
        dt = self.ensemble.grid.dt
        return self.fits[k].z.predict(self.basis.matrix(x)) / dt

    def predict_step(
            self, k: int, x: LiftedState, coeffs: t.Optional[CoefficientSet] = None,
        ) -> t.Tuple[np.ndarray, np.ndarray]:
        """(Y_k, G applied at step k) at states x, replaying the scheme of the solve; coeffs overrides the driver."""
        coeffs = coeffs or self.coefficients
        dt = self.ensemble.grid.dt
        time = self.ensemble.time(k)
        yhat = self.fits[k].y.predict(self.basis.matrix(x))
        z = self.predict_z(k, x)
        g = coeffs.G(time, x, yhat, z)
        y = yhat - dt * g
        for _ in range(self.picard_iterations):
            g = coeffs.G(time, x, y, z)
            y = yhat - dt * g
        return y, g

    def predict_y(self, k: int, x: LiftedState) -> np.ndarray:
        """Fitted decoupling field u(t_k, x) with the same scheme as the solve."""
        if k == self.ensemble.n_steps:
            return self.coefficients.Phi(x)
        return self.predict_step(k, x)[0]

    def check_z_bound(self) -> t.Optional[t.Dict[str, t.Any]]:
        """max |Z| against K |sigma| when the coefficient set declares K."""
        K = self.coefficients.z_bound_K
        if K is None:
            return None
        bound = K * self.coefficients.sigma_norm
        return {"max_abs_z": self.max_abs_z, "bound": bound, "ok": self.max_abs_z <= Z_BOUND_SLACK * bound}

    def diagnostics(self) -> t.List[t.Dict[str, t.Any]]:
        out = []
        for k, fits in enumerate(self.fits):
            out.append({
                "step": self.ensemble.k0 + k,
                "time": self.ensemble.time(k),
                "r2_y": float(np.atleast_1d(fits.y.r2)[0]),
                "r2_z": np.atleast_1d(fits.z.r2).tolist(),
                "condition_y": fits.y.condition,
                "condition_z": fits.z.condition,
                "rank": fits.y.rank,
                "dimension": fits.y.dimension,
            })
        return out


def _resolve_scheme(scheme: t.Optional[str], picard_iterations: t.Optional[int]) -> t.Tuple[str, int]:
    if scheme is None:
        configured = int(CONFIG.get("bsde", "picard_iterations", 0))
        scheme = PICARD if configured > 0 else EXPLICIT
        picard_iterations = picard_iterations if picard_iterations is not None else configured
    if scheme == EXPLICIT:
        return EXPLICIT, 0
    if scheme == PICARD:
        k = DEFAULT_PICARD_ITERATIONS if picard_iterations is None else int(picard_iterations)
        return PICARD, max(k, 1)
    raise ValueError(f"Unknown scheme '{scheme}', expected '{EXPLICIT}' or '{PICARD}'")


def solve_bsde(
        ensemble: ForwardEnsemble,
        coeffs: t.Optional[CoefficientSet] = None,
        basis: t.Optional[RegressionBasis] = None,
        scheme: t.Optional[str] = None,
        picard_iterations: t.Optional[int] = None,
    ) -> BsdeSolution:
    coeffs = coeffs or ensemble.coefficients
    basis = basis or RegressionBasis.default(ensemble.grid, ensemble.d)
    scheme, picard_iterations = _resolve_scheme(scheme, picard_iterations)
    n_steps, dt = ensemble.n_steps, ensemble.grid.dt
    Y = np.empty((ensemble.n_paths, n_steps + 1))
    Z = np.empty((ensemble.n_paths, n_steps, coeffs.d1))
    driver_values = np.empty((ensemble.n_paths, n_steps))
    Y[:, n_steps] = coeffs.Phi(ensemble.terminal_state())
    pathwise = Y[:, n_steps].copy()
    fits: t.List[t.Optional[StepFits]] = [None] * n_steps
    for k in reversed(range(n_steps)):
        X = ensemble.state(k)
        time = ensemble.time(k)
        fits[k], yhat, Z[:, k] = _fit_step(ensemble.k0 + k, basis.matrix(X), Y[:, k + 1], ensemble.dW[:, k], dt, basis)
        g = coeffs.G(time, X, yhat, Z[:, k])
        y = yhat - dt * g
        for _ in range(picard_iterations):
            g = coeffs.G(time, X, y, Z[:, k])
            y = yhat - dt * g
        Y[:, k] = y
        driver_values[:, k] = g
        pathwise -= dt * g
    solution = BsdeSolution(
        ensemble=ensemble, coefficients=coeffs, basis=basis, Y=Y, Z=Z, fits=tuple(fits),
        pathwise=pathwise, driver_values=driver_values, scheme=scheme,
        picard_iterations=picard_iterations,
    )
    logger.info(f"Solved '{coeffs.name}' ({scheme}): Y0 = {solution.y0:.6g} +- {solution.std_error:.2g}")
    return solution


@dataclass(frozen=True, eq=False)
class DerivativeSolution:
    """D_x Y h of shape (P, K + 1) and D_x Z h of shape (P, K, d1)."""
    DY: np.ndarray
    DZ: np.ndarray
    pathwise: np.ndarray

    @property
    def value(self) -> float:
        return float(np.mean(self.DY[:, 0]))

    @property
    def std_error(self) -> float:
        return float(np.std(self.pathwise, ddof=1) / np.sqrt(len(self.pathwise)))


def solve_first_derivative_bsde(
        ensemble: ForwardEnsemble,
        coeffs: CoefficientSet,
        flow: Trajectories,
        base: BsdeSolution,
        basis: t.Optional[RegressionBasis] = None,
    ) -> DerivativeSolution:
    """
    Terminal D Phi(X_T)[Xi_T h], driver D1 G[Xi h] + D2 G D_x Y h + D3 G D_x Z h evaluated
    along the base solution, same regression machinery as solve_bsde.
    """
    basis = basis or base.basis
    n_steps, dt = ensemble.n_steps, ensemble.grid.dt
    DY = np.empty((ensemble.n_paths, n_steps + 1))
    DZ = np.empty((ensemble.n_paths, n_steps, coeffs.d1))
    DY[:, n_steps] = coeffs.dPhi(ensemble.terminal_state(), flow.terminal_state())
    pathwise = DY[:, n_steps].copy()
    for k in reversed(range(n_steps)):
        X = ensemble.state(k)
        time = ensemble.time(k)
        _, dyhat, DZ[:, k] = _fit_step(ensemble.k0 + k, basis.matrix(X), DY[:, k + 1], ensemble.dW[:, k], dt, basis)
        gx, gy, gz = coeffs.G_partials(time, X, base.Y[:, k], base.Z[:, k], flow.state(k))
        dg = gx + gy * dyhat + np.sum(gz * DZ[:, k], axis=-1)
        DY[:, k] = dyhat - dt * dg
        pathwise -= dt * dg
    return DerivativeSolution(DY=DY, DZ=DZ, pathwise=pathwise)


def export_solution(solution: BsdeSolution, csv_path: str, diagnostics_path: t.Optional[str] = None) -> str:
    """CSV (path, step, time, Y, Z_j) plus per-step regression diagnostics as JSON."""
    ensemble = solution.ensemble
    n_paths, n_cols = solution.Y.shape
    steps = np.arange(ensemble.k0, ensemble.k0 + n_cols)
    frame = pd.DataFrame({
        "path": np.repeat(np.arange(n_paths), n_cols),
        "step": np.tile(steps, n_paths),
        "time": np.tile(steps * ensemble.grid.dt, n_paths),
        "Y": solution.Y.reshape(-1),
    })
    Z = np.concatenate([solution.Z, np.full((n_paths, 1, solution.Z.shape[-1]), np.nan)], axis=1)
    for j in range(Z.shape[-1]):
        frame[f"Z{j}"] = Z[..., j].reshape(-1)
    frame.to_csv(csv_path, index=False)
    if diagnostics_path is not None:
        payload = {
            "scheme": solution.scheme,
            "picard_iterations": solution.picard_iterations,
            "basis": solution.basis.describe(),
            "y0": solution.y0,
            "std_error": solution.std_error,
            "steps": solution.diagnostics(),
        }
        with open(diagnostics_path, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
    return csv_path
