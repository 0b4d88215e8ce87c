import numpy as np
import pytest

from common.errors import GridMismatch, NonGridTime, ProfileInconsistent
from segment import (
    LiftedState, PathGrid, SampledPath, SmoothProfile, check_profile, constant_state, extend,
    is_continuous_compatible, l2_norm, present_direction, restrict, sample_profile, shift,
    shift_steps, state_from_record, state_to_record, sup_norm, zero_state,
)


def test_grid_validation():
    with pytest.raises(ValueError):
        PathGrid(1.0, 1)
    with pytest.raises(ValueError):
        PathGrid(0.0, 10)
    with pytest.raises(ValueError):
        PathGrid(1.0, 2.5)


def test_index_of(grid):
    assert grid.index_of(0.0) == 0
    assert grid.index_of(0.3) == 6
    assert grid.index_of(1.0) == 20
    with pytest.raises(NonGridTime):
        grid.index_of(0.33)
    with pytest.raises(NonGridTime):
        grid.index_of(1.05)
    with pytest.raises(NonGridTime):
        grid.index_of(-0.05)


def test_past_times(grid):
    r = grid.past_times()
    assert len(r) == 20
    assert r[0] == pytest.approx(-1.0)
    assert r[-1] == pytest.approx(-grid.dt)


def test_state_shape_checks(grid):
    with pytest.raises(GridMismatch):
        LiftedState(np.zeros(1), np.zeros((19, 1)), grid)
    with pytest.raises(GridMismatch):
        LiftedState(np.zeros(2), np.zeros((20, 1)), grid)
    x = LiftedState(1.0, np.zeros(20), grid)
    assert x.d == 1 and x.past.shape == (20, 1)
    with pytest.raises(GridMismatch):
        x + constant_state(PathGrid(1.0, 10), 1.0)


def test_states_are_read_only(grid):
    x = constant_state(grid, 1.0)
    with pytest.raises(ValueError):
        x.past[0, 0] = 2.0


def test_extend_layout():
    grid = PathGrid(1.0, 4)
    chi = SampledPath(0.5, np.array([1.0, 2.0, 3.0]), grid)
    x = extend(chi, grid)
    np.testing.assert_array_equal(x.past[:, 0], [1.0, 1.0, 1.0, 2.0])
    np.testing.assert_array_equal(x.present, [3.0])


def test_restrict_extend_identity():
    rng = np.random.default_rng(0)
    for n in (2, 7, 32):
        grid = PathGrid(1.5, n)
        for k in range(n + 1):
            chi = SampledPath(grid.time(k), rng.normal(size=(k + 1, 2)), grid)
            back = restrict(extend(chi, grid), chi.t_end)
            np.testing.assert_array_equal(back.samples, chi.samples)


def test_restrict_reads_latest_past():
    grid = PathGrid(1.0, 4)
    x = LiftedState([9.0], np.arange(4.0), grid)
    path = restrict(x, 0.5)
    np.testing.assert_array_equal(path.samples[:, 0], [2.0, 3.0, 9.0])
    assert path.at(0.25)[0] == 3.0


def test_shift_semigroup():
    rng = np.random.default_rng(1)
    grid = PathGrid(2.0, 12)
    x = LiftedState(rng.normal(size=3), rng.normal(size=(12, 3)), grid)
    for i in range(13):
        for j in range(13 - i):
            twice = shift(shift(x, grid.time(i)), grid.time(j))
            direct = shift(x, grid.time(i + j))
            np.testing.assert_array_equal(twice.past, direct.past)
            np.testing.assert_array_equal(twice.present, direct.present)


def test_shift_edges(grid):
    rng = np.random.default_rng(2)
    x = LiftedState(rng.normal(size=1), rng.normal(size=(20, 1)), grid)
    assert shift(x, 0.0) is x
    full = shift(x, 1.0)
    np.testing.assert_array_equal(full.past, np.repeat(x.present[None], 20, axis=0))
    with pytest.raises(NonGridTime):
        shift(x, 0.01)
    with pytest.raises(NonGridTime):
        shift_steps(x, 21)


def test_batched_shift_acts_per_path(grid):
    rng = np.random.default_rng(3)
    batch = LiftedState(rng.normal(size=(5, 2)), rng.normal(size=(5, 20, 2)), grid)
    shifted = shift_steps(batch, 3)
    for p in range(5):
        single = shift_steps(batch.take(p), 3)
        np.testing.assert_array_equal(shifted.past[p], single.past)


def test_norms():
    grid = PathGrid(1.0, 2)
    x = LiftedState([3.0], np.array([-4.0, 1.0]), grid)
    assert sup_norm(x) == 4.0
    assert l2_norm(x) == pytest.approx(np.sqrt(9.0 + 0.5 * 17.0))
    assert sup_norm(zero_state(grid, 2)) == 0.0


def test_norm_embedding():
    rng = np.random.default_rng(4)
    grid = PathGrid(1.7, 30)
    batch = LiftedState(rng.normal(size=(50, 2)), rng.normal(size=(50, 30, 2)), grid)
    assert np.all(l2_norm(batch) <= np.sqrt(1.0 + grid.horizon_T) * sup_norm(batch) * (1 + 1e-12))


def test_continuous_compatible(grid):
    assert is_continuous_compatible(constant_state(grid, 2.0))
    jump = LiftedState([1.0], np.zeros(20), grid)
    assert not is_continuous_compatible(jump)


def test_present_direction(grid):
    h = present_direction(grid, [1.0, -2.0])
    np.testing.assert_array_equal(h.present, [1.0, -2.0])
    assert not np.any(h.past)


def test_sample_profile(grid):
    profile = SmoothProfile(lambda r: 1.0 + r ** 2, lambda r: 2 * r)
    x, ax = sample_profile(profile, grid)
    assert x.present[0] == 1.0
    np.testing.assert_allclose(x.past[:, 0], 1.0 + grid.past_times() ** 2)
    np.testing.assert_allclose(ax.past[:, 0], 2 * grid.past_times())
    assert ax.present[0] == 0.0


def test_inconsistent_profile(grid):
    profile = SmoothProfile(lambda r: np.sin(r), lambda r: np.sin(r))
    with pytest.raises(ProfileInconsistent):
        check_profile(profile, grid)


def test_state_record(grid):
    rng = np.random.default_rng(5)
    x = LiftedState(rng.normal(size=2), rng.normal(size=(20, 2)), grid)
    record = state_to_record(x)
    assert record["d"] == 2 and record["N"] == 20 and len(record["past"]) == 40
    y = state_from_record(record)
    np.testing.assert_array_equal(y.past, x.past)
    np.testing.assert_array_equal(y.present, x.present)
