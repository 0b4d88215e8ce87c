"""
Discretized product space R^d x D([-T,0)).

A lifted state stores the present value separately from N right-continuous samples of
the past at r_j = -T + j*dt. Every array may carry leading batch axes (one per Monte
Carlo path, for instance); operators act on the trailing (N, d) / (d,) axes only.
"""
import typing as t
from dataclasses import dataclass

import numpy as np

from common.errors import GridMismatch, NonGridTime, ProfileInconsistent

GRID_TOL = 1e-9
CADLAG_TOL = 1e-12


@dataclass(frozen=True)
class PathGrid:
    """Uniform grid of [-T, 0) for the past and of [0, T] for time."""
    horizon_T: float
    n_steps: int

    def __post_init__(self):
        if int(self.n_steps) != self.n_steps or self.n_steps < 2:
            raise ValueError(f"n_steps must be an integer >= 2, got {self.n_steps!r}")
        if not np.isfinite(self.horizon_T) or self.horizon_T <= 0:
            raise ValueError(f"horizon_T must be positive, got {self.horizon_T!r}")
        object.__setattr__(self, "horizon_T", float(self.horizon_T))
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def dt(self) -> float:
        return self.horizon_T / self.n_steps

    def index_of(self, time: float) -> int:
        """Grid index k with time == k*dt, 0 <= k <= N."""
        k = int(round(time / self.dt))
        if abs(time - k * self.dt) > GRID_TOL * max(1.0, self.horizon_T) or not 0 <= k <= self.n_steps:
            raise NonGridTime(time, self.dt)
        return k

    def time(self, k: int) -> float:
        return k * self.dt

    def past_times(self) -> np.ndarray:
        """r_j = -T + j*dt, j = 0..N-1."""
        return -self.horizon_T + self.dt * np.arange(self.n_steps)

    def past_index(self, r: np.ndarray) -> np.ndarray:
        """Slot holding the piecewise-constant (right-continuous) value at r in [-T, 0]."""
        idx = np.floor((np.asarray(r, dtype=float) + self.horizon_T) / self.dt + GRID_TOL)
        return np.clip(idx.astype(int), 0, self.n_steps - 1)


def _frozen(values: t.Any) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LiftedState:
    """A point x = (y, phi) of the product space, or a batch of such points."""
    present: np.ndarray
    past: np.ndarray
    grid: PathGrid

    def __post_init__(self):
        present = _frozen(self.present)
        past = _frozen(self.past)
        if present.ndim == 0:
            present = _frozen(present.reshape(1))
        if past.ndim == present.ndim:
            # Scalar-valued past given as (..., N) for d = 1.
            past = _frozen(past[..., None])
        if past.shape[-2] != self.grid.n_steps:
            raise GridMismatch(f"past has {past.shape[-2]} samples, grid has {self.grid.n_steps}")
        if past.shape[-1] != present.shape[-1] or past.shape[:-2] != present.shape[:-1]:
            raise GridMismatch(f"incompatible shapes present={present.shape} past={past.shape}")
        object.__setattr__(self, "present", present)
        object.__setattr__(self, "past", past)

    @property
    def d(self) -> int:
        return self.present.shape[-1]

    @property
    def batch_shape(self) -> t.Tuple[int, ...]:
        return self.present.shape[:-1]

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.present)) and np.all(np.isfinite(self.past)))

    def with_present(self, present: np.ndarray) -> "LiftedState":
        return LiftedState(present, self.past, self.grid)

    def take(self, index: t.Any) -> "LiftedState":
        """Select batch members (index applies to the leading axes)."""
        return LiftedState(self.present[index], self.past[index], self.grid)

    def broadcast(self, n: int) -> "LiftedState":
        """Repeat a single state into a batch of n identical states."""
        present = np.broadcast_to(self.present, (n,) + self.present.shape)
        past = np.broadcast_to(self.past, (n,) + self.past.shape)
        return LiftedState(present, past, self.grid)

    def _check_grid(self, other: "LiftedState"):
        if other.grid != self.grid:
            raise GridMismatch(f"{self.grid} != {other.grid}")

    def __add__(self, other: "LiftedState") -> "LiftedState":
        self._check_grid(other)
        return LiftedState(self.present + other.present, self.past + other.past, self.grid)

    def __sub__(self, other: "LiftedState") -> "LiftedState":
        self._check_grid(other)
        return LiftedState(self.present - other.present, self.past - other.past, self.grid)

    def __mul__(self, scalar: float) -> "LiftedState":
        return LiftedState(scalar * self.present, scalar * self.past, self.grid)

    __rmul__ = __mul__

    def __neg__(self) -> "LiftedState":
        return LiftedState(-self.present, -self.past, self.grid)

    def __repr__(self):
        return f"LiftedState(d={self.d}, N={self.grid.n_steps}, T={self.grid.horizon_T}, batch={self.batch_shape})"


@dataclass(frozen=True, eq=False)
class SampledPath:
    """Values of a path on [0, t_end] at grid times 0, dt, ..., t_end (leading batch axes allowed)."""
    t_end: float
    samples: np.ndarray
    grid: PathGrid

    def __post_init__(self):
        samples = _frozen(self.samples)
        if samples.ndim == 1:
            samples = _frozen(samples[:, None])
        k = self.grid.index_of(self.t_end)
        if samples.shape[-2] != k + 1:
            raise GridMismatch(f"{samples.shape[-2]} samples for t_end={self.t_end}, expected {k + 1}")
        object.__setattr__(self, "samples", samples)

    @property
    def n_samples(self) -> int:
        return self.samples.shape[-2]

    def at(self, time: float) -> np.ndarray:
        """Value at a grid time s <= t_end."""
        k = self.grid.index_of(time)
        if k >= self.n_samples:
            raise NonGridTime(time, self.grid.dt)
        return self.samples[..., k, :]

    def truncate(self, time: float) -> "SampledPath":
        k = self.grid.index_of(time)
        return SampledPath(time, self.samples[..., : k + 1, :], self.grid)


@dataclass(frozen=True)
class SmoothProfile:
    """A C^1 past profile; value_fn and derivative_fn map arrays of r in [-T, 0] to (len(r), d) or (len(r),)."""
    value_fn: t.Callable[[np.ndarray], np.ndarray]
    derivative_fn: t.Callable[[np.ndarray], np.ndarray]

    def values(self, r: np.ndarray) -> np.ndarray:
        r = np.atleast_1d(np.asarray(r, dtype=float))
        return np.asarray(self.value_fn(r), dtype=float).reshape(len(r), -1)

    def derivatives(self, r: np.ndarray) -> np.ndarray:
        r = np.atleast_1d(np.asarray(r, dtype=float))
        return np.asarray(self.derivative_fn(r), dtype=float).reshape(len(r), -1)


def restrict(x: LiftedState, time: float) -> SampledPath:
    """M_t: phi(s - t) on [0, t), y at s = t."""
    k = x.grid.index_of(time)
    n = x.grid.n_steps
    samples = np.concatenate([x.past[..., n - k:, :], x.present[..., None, :]], axis=-2)
    return SampledPath(time, samples, x.grid)


def extend(chi: SampledPath, grid: PathGrid) -> LiftedState:
    """L^t: present chi(t), past chi(0) on [-T, -t) and chi(t + r) on [-t, 0)."""
    if chi.grid != grid:
        raise GridMismatch(f"path grid {chi.grid} != {grid}")
    k = grid.index_of(chi.t_end)
    head = np.repeat(chi.samples[..., :1, :], grid.n_steps - k, axis=-2)
    past = np.concatenate([head, chi.samples[..., :k, :]], axis=-2)
    return LiftedState(chi.samples[..., k, :], past, grid)


def shift_steps(x: LiftedState, k: int) -> LiftedState:
    """e^{k dt A}: past moves left by k slots, the freed slots hold the present."""
    n = x.grid.n_steps
    if not 0 <= k <= n:
        raise NonGridTime(k * x.grid.dt, x.grid.dt)
    if k == 0:
        return x
    tail = np.repeat(x.present[..., None, :], k, axis=-2)
    past = np.concatenate([x.past[..., k:, :], tail], axis=-2)
    return LiftedState(x.present, past, x.grid)


def shift(x: LiftedState, time: float) -> LiftedState:
    return shift_steps(x, x.grid.index_of(time))


def sup_norm(x: LiftedState) -> np.ndarray:
    """max(|y|, max_j |phi_j|); a float for a single state, an array for a batch."""
    present = np.linalg.norm(x.present, axis=-1)
    past = np.linalg.norm(x.past, axis=-1).max(axis=-1)
    out = np.maximum(present, past)
    return float(out) if out.ndim == 0 else out


def l2_norm(x: LiftedState, grid: t.Optional[PathGrid] = None) -> np.ndarray:
    """sqrt(|y|^2 + dt * sum_j |phi_j|^2)."""
    grid = grid or x.grid
    out = np.sqrt(np.sum(x.present ** 2, axis=-1) + grid.dt * np.sum(x.past ** 2, axis=(-2, -1)))
    return float(out) if out.ndim == 0 else out


def cadlag_tolerance(x: LiftedState) -> np.ndarray:
    return CADLAG_TOL * (1.0 + sup_norm(x))


def junction_gap(x: LiftedState) -> np.ndarray:
    """|past[N-1] - present|: the jump of the sampled path where the past meets the present."""
    out = np.linalg.norm(x.past[..., -1, :] - x.present, axis=-1)
    return float(out) if out.ndim == 0 else out


def is_continuous_compatible(x: LiftedState) -> np.ndarray:
    """Discrete membership of the continuous-junction subspace: past[N-1] equals the present."""
    out = junction_gap(x) <= cadlag_tolerance(x)
    return bool(out) if np.ndim(out) == 0 else out


def zero_state(grid: PathGrid, d: int) -> LiftedState:
    return LiftedState(np.zeros(d), np.zeros((grid.n_steps, d)), grid)


def constant_state(grid: PathGrid, value: t.Union[float, t.Sequence[float]]) -> LiftedState:
    value = np.atleast_1d(np.asarray(value, dtype=float))
    return LiftedState(value, np.tile(value, (grid.n_steps, 1)), grid)


def present_direction(grid: PathGrid, vector: t.Sequence[float]) -> LiftedState:
    """(v, 0): a perturbation acting on the present only."""
    vector = np.atleast_1d(np.asarray(vector, dtype=float))
    return LiftedState(vector, np.zeros((grid.n_steps, len(vector))), grid)


def check_profile(profile: SmoothProfile, grid: PathGrid, n_points: int = 5, seed: int = 0, rtol: float = 1e-4):
    """Compare derivative_fn with a central difference of value_fn at random interior points."""
    rng = np.random.default_rng(seed)
    T = grid.horizon_T
    h = 1e-5 * max(1.0, T)
    r = rng.uniform(-T + 2 * h, -2 * h, size=n_points)
    fd = (profile.values(r + h) - profile.values(r - h)) / (2 * h)
    analytic = profile.derivatives(r)
    err = np.abs(fd - analytic) / (1.0 + np.abs(analytic))
    if not np.all(err <= rtol):
        raise ProfileInconsistent(f"derivative check failed, max relative error {err.max():.3e}")


def sample_profile(profile: SmoothProfile, grid: PathGrid) -> t.Tuple[LiftedState, LiftedState]:
    """Sample a smooth profile into x and the direction Ax = (0, phi')."""
    check_profile(profile, grid)
    r = grid.past_times()
    present = profile.values(np.array([0.0]))[0]
    x = LiftedState(present, profile.values(r), grid)
    ax = LiftedState(np.zeros_like(present), profile.derivatives(r), grid)
    return x, ax


def state_to_record(x: LiftedState) -> t.Dict[str, t.Any]:
    """Flat JSON record {d, N, T, present[d], past[N*d]} (row-major past)."""
    if x.batch_shape != ():
        raise ValueError("only single states are serialized")
    return {
        "d": x.d,
        "N": x.grid.n_steps,
        "T": x.grid.horizon_T,
        "present": x.present.tolist(),
        "past": x.past.reshape(-1).tolist(),
    }


def state_from_record(record: t.Dict[str, t.Any]) -> LiftedState:
    grid = PathGrid(record["T"], record["N"])
    d = int(record["d"])
    past = np.asarray(record["past"], dtype=float).reshape(grid.n_steps, d)
    return LiftedState(np.asarray(record["present"], dtype=float), past, grid)
