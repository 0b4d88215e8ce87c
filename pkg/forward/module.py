"""
Mild Euler scheme for the lifted forward equation and its first-variation flow.

One step: the state is shifted by dt (the past absorbs the current present), then the
present receives b(t_k, M_{t_k} X_k) dt + sigma dW_k. With this order the lifted trajectory
restricted at t_k is exactly the Euler path prefix, so every ensemble is stored as a
single history array [x0 past, xi_{k0}, ..., xi_N] per path.
"""
import json
import typing as t
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import pandas as pd
import pyarrow as pa
import pyarrow.feather as feather

from common.colors import get_logger
from common.errors import CoefficientEvaluation, GridMismatch
from common.pool import WorkerPool
from segment import LiftedState, PathGrid, SampledPath, extend, shift_steps, state_from_record, state_to_record
from forward.coefficients import CoefficientSet
from forward.noise import NoiseSpec, increments

logger = get_logger(__name__)

# Feedback hook: (absolute step, batch state, path rows of the batch) -> controls of shape (batch, d1).
ControlFn = t.Callable[[int, LiftedState, slice], np.ndarray]


def noise_term(sigma: np.ndarray, dw: np.ndarray) -> np.ndarray:
    """sigma @ dw per path with a fixed summation order."""
    return (dw[..., None, :] * sigma).sum(axis=-1)


def euler_update(present: np.ndarray, drift: np.ndarray, dw: np.ndarray, sigma: np.ndarray, dt: float) -> np.ndarray:
    return present + (drift * dt + noise_term(sigma, dw))


@dataclass(frozen=True, eq=False)
class Trajectories:
    """
    Lifted trajectories sharing one storage layout: state k of path p has past
    history[p, k:k+N] and present history[p, N+k].
    """
    initial: LiftedState
    presents: np.ndarray
    t0: float

    def __post_init__(self):
        presents = np.array(self.presents, dtype=float)
        presents.setflags(write=False)
        object.__setattr__(self, "presents", presents)

    @property
    def grid(self) -> PathGrid:
        return self.initial.grid

    @property
    def k0(self) -> int:
        return self.grid.index_of(self.t0)

    @property
    def n_paths(self) -> int:
        return self.presents.shape[0]

    @property
    def n_steps(self) -> int:
        return self.presents.shape[1] - 1

    @property
    def d(self) -> int:
        return self.presents.shape[2]

    def time(self, k: int) -> float:
        return self.grid.time(self.k0 + k)

    @cached_property
    def history(self) -> np.ndarray:
        n = self.grid.n_steps
        past = np.broadcast_to(self.initial.past, (self.n_paths, n, self.d))
        out = np.concatenate([past, self.presents], axis=1)
        out.setflags(write=False)
        return out

    def state(self, k: int, paths: t.Optional[slice] = None) -> LiftedState:
        """Batch of lifted states at local step k (time t0 + k dt)."""
        if not 0 <= k <= self.n_steps:
            raise IndexError(f"step {k} outside [0, {self.n_steps}]")
        n = self.grid.n_steps
        hist = self.history if paths is None else self.history[paths]
        return LiftedState(hist[:, n + k], hist[:, k:k + n], self.grid)

    def state_of(self, path: int, k: int) -> LiftedState:
        return self.state(k, slice(path, path + 1)).take(0)

    def terminal_state(self) -> LiftedState:
        return self.state(self.n_steps)


@dataclass(frozen=True, eq=False)
class ForwardEnsemble(Trajectories):
    """Monte Carlo ensemble of lifted forward paths with the increments that drove them."""
    dW: np.ndarray = None
    noise: t.Optional[NoiseSpec] = None
    coefficients: t.Optional[CoefficientSet] = None
    controls: t.Optional[np.ndarray] = None

    def __post_init__(self):
        super().__post_init__()
        for name in ("dW", "controls"):
            value = getattr(self, name)
            if value is not None:
                value = np.array(value, dtype=float)
                value.setflags(write=False)
                object.__setattr__(self, name, value)

    @property
    def x0(self) -> LiftedState:
        return self.initial


def simulate_forward(
        coeffs: CoefficientSet,
        t0: float,
        x0: LiftedState,
        noise: NoiseSpec,
        control: t.Optional[ControlFn] = None,
        pool: t.Optional[WorkerPool] = None,
    ) -> ForwardEnsemble:
    """
    Simulate X^{t0, x0} on [t0, T]. With a control hook the drift becomes b + sigma u_k
    and the applied controls are kept on the ensemble.
    """
    grid = noise.grid
    if x0.grid != grid:
        raise GridMismatch(f"initial state grid {x0.grid} != noise grid {grid}")
    if x0.batch_shape != ():
        raise ValueError("simulate_forward expects a single initial state")
    if x0.d != coeffs.d or noise.d1 != coeffs.d1:
        raise GridMismatch(f"dimensions d={x0.d}, d1={noise.d1} do not match sigma {coeffs.sigma.shape}")
    k0 = grid.index_of(t0)
    n_steps = grid.n_steps - k0
    pool = pool or WorkerPool()
    dW = increments(noise, steps=range(k0, grid.n_steps), pool=pool)
    presents = np.empty((noise.n_paths, n_steps + 1, x0.d))
    controls = np.empty((noise.n_paths, n_steps, coeffs.d1)) if control is not None else None
    sigma, dt = coeffs.sigma, grid.dt

    def run(chunk: range):
        rows = slice(chunk.start, chunk.stop)
        X = x0.broadcast(len(chunk))
        presents[rows, 0] = x0.present
        for k in range(n_steps):
            time = grid.time(k0 + k)
            drift = coeffs.b(time, X)
            if control is not None:
                u = np.asarray(control(k0 + k, X, rows), dtype=float)
                controls[rows, k] = u
                drift = drift + noise_term(sigma, u)
            present = euler_update(X.present, drift, dW[rows, k], sigma, dt)
            if not np.all(np.isfinite(present)):
                raise CoefficientEvaluation(f"forward state of '{coeffs.name}' diverged at step {k0 + k}")
            X = shift_steps(X, 1).with_present(present)
            presents[rows, k + 1] = present

    pool.map_chunks(run, noise.n_paths)
    logger.info(f"Simulated {noise.n_paths} paths of '{coeffs.name}' over {n_steps} steps from t0={t0}")
    return ForwardEnsemble(
        initial=x0, presents=presents, t0=t0, dW=dW, noise=noise, coefficients=coeffs, controls=controls,
    )


def simulate_unlifted(
        coeffs: CoefficientSet, gamma: SampledPath, noise: NoiseSpec, pool: t.Optional[WorkerPool] = None
    ) -> np.ndarray:
    """
    Plain Euler scheme for the path-dependent equation on R^d started from the path gamma on
    [0, t0]. Returns the whole path, shape (n_paths, N + 1, d).
    """
    if coeffs.drift is None and coeffs.state_drift is not None:
        raise ValueError("the unlifted scheme needs the path functional drift")
    grid = noise.grid
    k0 = grid.index_of(gamma.t_end)
    d = gamma.samples.shape[-1]
    pool = pool or WorkerPool()
    dW = increments(noise, steps=range(k0, grid.n_steps), pool=pool)
    xi = np.empty((noise.n_paths, grid.n_steps + 1, d))
    xi[:, : k0 + 1] = gamma.samples
    sigma, dt = coeffs.sigma, grid.dt

    def run(chunk: range):
        rows = slice(chunk.start, chunk.stop)
        for k in range(k0, grid.n_steps):
            time = grid.time(k)
            if coeffs.drift is None:
                drift = np.zeros((len(chunk), d))
            else:
                prefix = SampledPath(time, xi[rows, : k + 1], grid)
                drift = np.broadcast_to(np.asarray(coeffs.drift(time, prefix), dtype=float), (len(chunk), d))
            xi[rows, k + 1] = euler_update(xi[rows, k], drift, dW[rows, k - k0], sigma, dt)

    pool.map_chunks(run, noise.n_paths)
    return xi


def lift_path(gamma: SampledPath) -> LiftedState:
    return extend(gamma, gamma.grid)


def variational_flow(
        coeffs: CoefficientSet, ensemble: ForwardEnsemble, h: LiftedState, pool: t.Optional[WorkerPool] = None
    ) -> Trajectories:
    """Path-by-path D_x X h: shift by dt, then present += dt * DB(t_k, X_k)[Xi_k h]."""
    if h.grid != ensemble.grid:
        raise GridMismatch(f"direction grid {h.grid} != ensemble grid {ensemble.grid}")
    presents = np.empty(ensemble.presents.shape)
    dt = ensemble.grid.dt
    pool = pool or WorkerPool()

    def run(chunk: range):
        rows = slice(chunk.start, chunk.stop)
        xi = h.broadcast(len(chunk)) if h.batch_shape == () else h.take(rows)
        presents[rows, 0] = xi.present
        for k in range(ensemble.n_steps):
            X = ensemble.state(k, rows)
            present = xi.present + dt * coeffs.db(ensemble.time(k), X, xi)
            xi = shift_steps(xi, 1).with_present(present)
            presents[rows, k + 1] = present

    pool.map_chunks(run, ensemble.n_paths)
    return Trajectories(initial=h, presents=presents, t0=ensemble.t0)


def method_of_steps(
        a: float, tau: float, y0: t.Union[float, t.Sequence[float]], grid: PathGrid, refine: int = 10
    ) -> np.ndarray:
    """
    xi' = a xi((s - tau) v 0), xi(0) = y0, integrated with the trapezoid rule on a grid
    refine times finer than `grid`. Returns values at the grid times, shape (N + 1, d).
    """
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    h = grid.dt / refine
    n = grid.n_steps * refine
    lag = int(round(tau / h))
    xi = np.empty((n + 1, len(y0)))
    xi[0] = y0
    for i in range(n):
        f_left = a * xi[max(i - lag, 0)]
        if lag >= 1:
            xi[i + 1] = xi[i] + 0.5 * h * (f_left + a * xi[max(i + 1 - lag, 0)])
        else:
            xi[i + 1] = (xi[i] + 0.5 * h * f_left) / (1.0 - 0.5 * h * a)
    return xi[::refine]


def moment_statistic(ensemble: Trajectories, p: float) -> float:
    """Sample estimate of E sup_k sup_norm(X_k)^p."""
    norms = np.linalg.norm(ensemble.history, axis=-1)
    return float(np.mean(norms.max(axis=1) ** p))


def ensemble_frame(ensemble: ForwardEnsemble) -> pd.DataFrame:
    n_paths, n_cols, d = ensemble.presents.shape
    frame = pd.DataFrame({
        "path": np.repeat(np.arange(n_paths), n_cols),
        "step": np.tile(np.arange(ensemble.k0, ensemble.k0 + n_cols), n_paths),
    })
    frame["time"] = frame["step"] * ensemble.grid.dt
    flat = ensemble.presents.reshape(-1, d)
    for j in range(d):
        frame[f"x{j}"] = flat[:, j]
    return frame


def export_csv(ensemble: ForwardEnsemble, path: str) -> str:
    """One row per (path, step) with the present components; pasts are recoverable from the rows."""
    ensemble_frame(ensemble).to_csv(path, index=False)
    return path


def write_snapshot(ensemble: ForwardEnsemble, path: str) -> str:
    """Arrow IPC (feather) snapshot: presents and increments per (path, step), x0 in the metadata."""
    frame = ensemble_frame(ensemble)
    dW = np.concatenate([ensemble.dW, np.full((ensemble.n_paths, 1, ensemble.dW.shape[-1]), np.nan)], axis=1)
    flat = dW.reshape(-1, dW.shape[-1])
    for j in range(flat.shape[1]):
        frame[f"dW{j}"] = flat[:, j]
    table = pa.Table.from_pandas(frame, preserve_index=False)
    metadata = {
        "t0": json.dumps(ensemble.t0),
        "x0": json.dumps(state_to_record(ensemble.x0)),
        "seed": json.dumps(ensemble.noise.seed if ensemble.noise is not None else None),
        "coefficients": json.dumps(ensemble.coefficients.name if ensemble.coefficients is not None else ""),
    }
    table = table.replace_schema_metadata({**(table.schema.metadata or {}), **metadata})
    feather.write_feather(table, path)
    return path


def read_snapshot(path: str) -> ForwardEnsemble:
    """Inverse of write_snapshot; the coefficient set is not stored and comes back as None."""
    table = feather.read_table(path)
    metadata = {k.decode(): v.decode() for k, v in (table.schema.metadata or {}).items()}
    x0 = state_from_record(json.loads(metadata["x0"]))
    t0 = json.loads(metadata["t0"])
    frame = table.to_pandas()
    n_paths = int(frame["path"].max()) + 1
    n_cols = len(frame) // n_paths
    x_cols = [c for c in frame.columns if c.startswith("x")]
    w_cols = [c for c in frame.columns if c.startswith("dW")]
    presents = frame[x_cols].to_numpy().reshape(n_paths, n_cols, len(x_cols))
    dW = frame[w_cols].to_numpy().reshape(n_paths, n_cols, len(w_cols))[:, :-1]
    seed = json.loads(metadata["seed"])
    noise = NoiseSpec(seed, n_paths, len(w_cols), x0.grid) if seed is not None else None
    return ForwardEnsemble(initial=x0, presents=presents, t0=t0, dW=dW, noise=noise)
