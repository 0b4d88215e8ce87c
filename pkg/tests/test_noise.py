import numpy as np
import pytest

from common.errors import IndexOutOfRange
from common.pool import WorkerPool
from forward import NoiseSpec, brownian_increment, increments
from segment import PathGrid


def test_single_increment_matches_block(grid):
    spec = NoiseSpec(11, 50, 2, grid)
    block = increments(spec)
    assert block.shape == (50, 20, 2)
    for path, step in [(0, 0), (7, 13), (49, 19)]:
        np.testing.assert_array_equal(brownian_increment(spec, path, step), block[path, step])


def test_sub_blocks_are_slices(grid):
    spec = NoiseSpec(5, 40, 3, grid)
    full = increments(spec)
    part = increments(spec, steps=range(4, 9), paths=range(10, 25))
    np.testing.assert_array_equal(part, full[10:25, 4:9])


def test_independent_of_worker_count(grid):
    spec = NoiseSpec(2, 101, 1, grid)
    one = increments(spec, pool=WorkerPool(1))
    many = increments(spec, pool=WorkerPool(7))
    np.testing.assert_array_equal(one, many)


def test_seeds_differ(grid):
    a = increments(NoiseSpec(1, 10, 1, grid))
    b = increments(NoiseSpec(2, 10, 1, grid))
    assert not np.array_equal(a, b)


def test_path_count_does_not_change_existing_paths(grid):
    small = increments(NoiseSpec(9, 10, 1, grid))
    large = increments(NoiseSpec(9, 100, 1, grid))
    np.testing.assert_array_equal(small, large[:10])


def test_wide_noise_uses_more_blocks(grid):
    assert NoiseSpec(0, 1, 4, grid).blocks_per_step == 1
    assert NoiseSpec(0, 1, 5, grid).blocks_per_step == 2
    spec = NoiseSpec(0, 3, 6, grid)
    out = increments(spec)
    assert out.shape == (3, 20, 6)
    assert np.all(np.isfinite(out))


def test_gaussian_moments():
    grid = PathGrid(1.0, 10)
    dw = increments(NoiseSpec(123, 20000, 1, grid)).reshape(-1)
    n = len(dw)
    assert abs(dw.mean()) <= 4 * np.sqrt(grid.dt / n)
    # var of the sample variance of N(0, s2) is 2 s2^2 / n
    assert abs(dw.var() - grid.dt) <= 4 * grid.dt * np.sqrt(2.0 / n)


def test_index_checks(grid):
    spec = NoiseSpec(0, 5, 1, grid)
    with pytest.raises(IndexOutOfRange):
        brownian_increment(spec, 5, 0)
    with pytest.raises(IndexOutOfRange):
        brownian_increment(spec, 0, 20)
    with pytest.raises(IndexOutOfRange):
        increments(spec, steps=range(18, 22))


def test_spec_validation(grid):
    with pytest.raises(ValueError):
        NoiseSpec(0, 0, 1, grid)
    spec = NoiseSpec(0, 5, 1, grid)
    assert spec.with_seed(3).seed == 3
    assert spec.with_paths(8).n_paths == 8
