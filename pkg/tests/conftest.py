import numpy as np
import pytest

from common.pool import WorkerPool
from segment import PathGrid, constant_state
from forward import CoefficientSet, NoiseSpec


@pytest.fixture
def grid() -> PathGrid:
    return PathGrid(1.0, 20)


@pytest.fixture
def pool() -> WorkerPool:
    return WorkerPool(4)


@pytest.fixture
def heat(grid):
    """u(t, x) = y^2 + (T - t) for dX = dW."""
    coeffs = CoefficientSet(
        sigma=[[1.0]], terminal=lambda x: x.present[..., 0] ** 2,
        terminal_derivative=lambda x, h: 2 * x.present[..., 0] * h.present[..., 0],
        growth_m=2, name="heat",
    )
    return coeffs, constant_state(grid, 0.5)


def noise(grid: PathGrid, n_paths: int = 2000, seed: int = 3, d1: int = 1) -> NoiseSpec:
    return NoiseSpec(seed, n_paths, d1, grid)


def within(estimate: float, expected: float, std_error: float, bias: float = 0.0, k: float = 4.0) -> bool:
    return abs(estimate - expected) <= k * std_error + bias
