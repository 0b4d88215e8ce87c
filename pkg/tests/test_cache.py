import numpy as np

from calculus import ValueEstimate, ValueQuery, value
from common.cache import ValueCache
from common.config import CONFIG
from tests.conftest import noise


def test_set_and_get(tmp_path):
    cache = ValueCache(tmp_path, parallelism=2)
    assert cache.get_object("missing") is None
    cache.set_object("key", {"mean": 1.5})
    assert cache.get_object("key") == {"mean": 1.5}
    cache.set_object("key", [1, 2])
    assert cache.get_object("key") == [1, 2]
    cache.close()
    assert ValueCache(tmp_path, parallelism=2).get_object("key") == [1, 2]


def test_cached_value(tmp_path, monkeypatch, grid, heat):
    coeffs, x0 = heat
    cache = ValueCache(tmp_path, parallelism=2)
    monkeypatch.setitem(CONFIG.values, "cache", {"enabled": True})
    monkeypatch.setattr("calculus.module.VALUE_CACHE", cache)
    q = ValueQuery(0.0, x0, coeffs.replace(cache_key="heat"), noise(grid, 500))
    first = value(q)
    second = value(q)
    np.testing.assert_array_equal(first.samples, second.samples)
    cache.set_object(q.cache_digest(), ValueEstimate(42.0, 0.0, 1, np.zeros(1)))
    assert value(q).mean == 42.0
    assert value(q.at(x0=x0 * 2.0)).mean != 42.0


def test_uncached_without_key(tmp_path, monkeypatch, grid, heat):
    coeffs, x0 = heat
    monkeypatch.setitem(CONFIG.values, "cache", {"enabled": True})
    monkeypatch.setattr("calculus.module.VALUE_CACHE", ValueCache(tmp_path, parallelism=1))
    q = ValueQuery(0.0, x0, coeffs, noise(grid, 200))
    assert q.cache_digest() is None
    assert value(q).n_paths == 200
