"""
Counter-based Brownian increments.

Each (seed, path, step) owns a fixed block of a Philox4x64 stream: the key is the seed and
the counter is (step * blocks_per_step, path, 0, 0). A single increment is regenerated by
positioning the counter, so results never depend on call order or worker layout.
"""
import typing as t
from dataclasses import dataclass

import numpy as np

from common.errors import IndexOutOfRange
from common.pool import WorkerPool
from segment import PathGrid

WORDS_PER_BLOCK = 4
UINT64_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class NoiseSpec:
    seed: int
    n_paths: int
    d1: int
    grid: PathGrid

    def __post_init__(self):
        if self.n_paths < 1 or self.d1 < 1:
            raise ValueError(f"n_paths and d1 must be positive, got {self.n_paths}, {self.d1}")

    @property
    def blocks_per_step(self) -> int:
        return -(-self.d1 // WORDS_PER_BLOCK)

    def with_seed(self, seed: int) -> "NoiseSpec":
        return NoiseSpec(seed, self.n_paths, self.d1, self.grid)

    def with_paths(self, n_paths: int) -> "NoiseSpec":
        return NoiseSpec(self.seed, n_paths, self.d1, self.grid)


def _normals(raw: np.ndarray) -> np.ndarray:
    """Box-Muller on consecutive word pairs; output has the shape of raw."""
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
    u1, u2 = u[..., 0::2], u[..., 1::2]
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    out = np.empty_like(u)
    out[..., 0::2] = radius * np.cos(angle)
    out[..., 1::2] = radius * np.sin(angle)
    return out


def _path_normals(noise: NoiseSpec, path: int, steps: range) -> np.ndarray:
    bps = noise.blocks_per_step
    counter = np.array([steps.start * bps, path, 0, 0], dtype=np.uint64)
    bit_generator = np.random.Philox(key=int(noise.seed) & UINT64_MASK, counter=counter)
    raw = bit_generator.random_raw(len(steps) * bps * WORDS_PER_BLOCK)
    normals = _normals(raw.reshape(len(steps), bps * WORDS_PER_BLOCK))
    return normals[:, : noise.d1]


def _check_indices(noise: NoiseSpec, paths: range, steps: range):
    if len(paths) and (paths.start < 0 or paths.stop > noise.n_paths):
        raise IndexOutOfRange(f"paths {paths} outside [0, {noise.n_paths})")
    if len(steps) and (steps.start < 0 or steps.stop > noise.grid.n_steps):
        raise IndexOutOfRange(f"steps {steps} outside [0, {noise.grid.n_steps})")


def brownian_increment(noise: NoiseSpec, path: int, step: int) -> np.ndarray:
    """W_{t_{step+1}} - W_{t_step} for one path, distributed N(0, dt I)."""
    _check_indices(noise, range(path, path + 1), range(step, step + 1))
    return np.sqrt(noise.grid.dt) * _path_normals(noise, path, range(step, step + 1))[0]


def increments(
        noise: NoiseSpec,
        steps: t.Optional[range] = None,
        paths: t.Optional[range] = None,
        pool: t.Optional[WorkerPool] = None,
    ) -> np.ndarray:
    """Increments for a block of paths and absolute steps, shape (len(paths), len(steps), d1)."""
    if steps is None:
        steps = range(noise.grid.n_steps)
    if paths is None:
        paths = range(noise.n_paths)
    _check_indices(noise, paths, steps)
    out = np.empty((len(paths), len(steps), noise.d1))
    scale = np.sqrt(noise.grid.dt)
    pool = pool or WorkerPool()

    def fill(chunk: range):
        for i in chunk:
            out[i] = scale * _path_normals(noise, paths[i], steps)

    if len(steps) > 0:
        pool.map_chunks(fill, len(paths))
    return out
