import json
from pathlib import Path

import numpy as np
import pytest

import main
from bench import (
    BENCHMARKS, MODES, PROVENANCE_TAGS, SUITES, Benchmark, ExperimentConfig, accept, check_determinism,
    constant_profile, get_benchmark, list_benchmarks, load, run,
)
from bench.acceptance import exact_algebra
from bench.experiment import MODE_OPTIONS, SECTIONS
from common.errors import BenchmarkUnknown, ConfigInvalid
from common.pool import WorkerPool
from forward import NoiseSpec
from segment import PathGrid, shift

REPO = Path(__file__).resolve().parents[1]


def test_registry_builds():
    grid = PathGrid(1.0, 20)
    for bench in BENCHMARKS.values():
        coeffs = bench.coefficients(grid)
        x0 = bench.initial_state(grid)
        assert x0.d == coeffs.d
        if bench.closed_form is not None:
            assert bench.provenance in PROVENANCE_TAGS
        if bench.expected is not None:
            expected = bench.expectation(grid, 0.0, x0, NoiseSpec(0, 50, coeffs.d1, grid))
            assert np.isfinite(expected)
        if bench.problem is not None:
            assert bench.control_problem(grid).d1 == coeffs.d1


def test_registry_expectations():
    grid = PathGrid(1.0, 20)
    heat = get_benchmark("heat-present-square")
    assert heat.expectation(grid, 0.0, heat.initial_state(grid), None) == pytest.approx(1.25)
    lq = get_benchmark("lq-control")
    assert lq.expectation(grid, 0.0, lq.initial_state(grid), None) == pytest.approx(0.18)
    delay = get_benchmark("point-delay")
    assert delay.expectation(grid, 0.0, delay.initial_state(grid), None) == pytest.approx(1 + 1 + 1 / 8, rel=0.05)


def test_untagged_closed_form():
    with pytest.raises(ValueError):
        Benchmark("untagged", "", lambda grid: None, lambda: constant_profile(0.0), closed_form="u = 0")
    with pytest.raises(ValueError):
        Benchmark("bare", "", lambda grid: None, lambda: constant_profile(0.0), expected=lambda *a: 0.0)


def test_unknown_benchmark_and_params():
    with pytest.raises(BenchmarkUnknown):
        get_benchmark("nope")
    with pytest.raises(ConfigInvalid) as info:
        get_benchmark("heat-present-square").resolve_params({"rate": 1.0})
    assert info.value.field == "params.rate"
    with pytest.raises(ConfigInvalid):
        get_benchmark("heat-present-square").control_problem(PathGrid(1.0, 20))


def test_list_benchmarks():
    frame = list_benchmarks()
    assert list(frame.columns) == ["name", "coefficients", "closed_form", "provenance", "control"]
    assert set(frame["name"]) == set(BENCHMARKS)
    assert frame.loc[frame["name"] == "lq-control", "control"].item()


@pytest.mark.parametrize("doc, field", [
    ({"benchmark": "heat-present-square", "foo": 1}, "foo"),
    ({"mode": "value"}, "benchmark"),
    ({"benchmark": "heat-present-square", "mode": "sample"}, "mode"),
    ({"benchmark": "heat-present-square", "grid": {"N": 1}}, "grid.N"),
    ({"benchmark": "heat-present-square", "grid": {"T": -1.0}}, "grid.T"),
    ({"benchmark": "heat-present-square", "grid": {"dt": 0.1}}, "grid.dt"),
    ({"benchmark": "heat-present-square", "mc": {"seed": -1}}, "mc.seed"),
    ({"benchmark": "heat-present-square", "mc": {"n_paths": 1.5}}, "mc.n_paths"),
    ({"benchmark": "heat-present-square", "query": {"t0": 0.033}}, "query.t0"),
    ({"benchmark": "heat-present-square", "query": {"profile": "constant"}}, "query.x0"),
    ({"benchmark": "heat-present-square", "params": {"rate": 1.0}}, "params.rate"),
    ({"benchmark": "heat-present-square", "mode": "control"}, "mode"),
    ({"benchmark": "lq-control", "mode": "control", "control": {"fresh_seed": 0}}, "control.fresh_seed"),
    ({"benchmark": "heat-present-square", "mode": "mollify", "mollify": {"n_list": [2, 8]}}, "mollify.n_list"),
    ({"benchmark": "heat-present-square", "mode": "residual", "residual": {"levels": [64, 32]}}, "residual.levels"),
    ({"benchmark": "heat-present-square", "mode": "derivative", "derivative": {"interior_times": [1.0]}}, "derivative.interior_times"),
    ({"benchmark": "heat-present-square", "mode": "flow", "flow": {"mode": "exact"}}, "flow.mode"),
    ({"benchmark": "heat-present-square", "mode": "value", "flow": {"t1": 0.5}}, "flow"),
    ({"benchmark": "point-delay", "grid": {"N": 5}}, "params"),
])
def test_config_errors(doc, field):
    with pytest.raises(ConfigInvalid) as info:
        ExperimentConfig.from_dict(doc)
    assert info.value.field == field


def test_config_round_trip():
    for path in sorted((REPO / "configs" / "experiments").glob("*.toml")):
        config = load(str(path))
        assert config.mode in MODES
        assert ExperimentConfig.from_dict(config.to_dict()) == config


def test_load_errors(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("benchmark = \n")
    with pytest.raises(ConfigInvalid):
        load(str(bad))
    with pytest.raises(ConfigInvalid):
        load(str(tmp_path / "missing.toml"))


def test_schema_matches_validation():
    with open(REPO / "configs" / "schemas" / "experiment.schema.json") as f:
        schema = json.load(f)
    assert set(schema["properties"]) == SECTIONS
    for mode, options in MODE_OPTIONS.items():
        assert set(schema["properties"][mode]["properties"]) == set(options)


def test_value_run(tmp_path):
    config = ExperimentConfig.from_dict({
        "benchmark": "exponential-driver", "grid": {"N": 10}, "mc": {"n_paths": 400}, "output_dir": str(tmp_path),
    })
    report = run(config, seed=2)
    assert report.seed == 2
    assert report.output_dir == tmp_path
    for name in ("report.json", "payload.json", "regression.csv", "solution.csv", "regression.json"):
        assert (tmp_path / name).exists()
    written = json.loads((tmp_path / "report.json").read_text())
    assert written["config"]["mc"]["seed"] == 2
    assert [c["name"] for c in written["checks"]] == ["closed_form"]
    payload = json.loads((tmp_path / "payload.json").read_text())
    assert set(payload) == {"payload", "checks"}


def test_forward_run_lifts_and_unlifts(tmp_path):
    config = ExperimentConfig.from_dict({
        "benchmark": "point-delay", "mode": "forward", "grid": {"N": 16}, "mc": {"n_paths": 100},
        "params": {"sigma": 1.0}, "forward": {"export_paths": 5}, "output_dir": str(tmp_path),
    })
    report = run(config)
    checks = {c["name"]: c for c in report.checks}
    assert checks["lift_unlift_max_diff"]["ok"]
    assert len(report.tables["ensemble"]) == 5 * 17
    assert (tmp_path / "ensemble.feather").exists()


def test_determinism(tmp_path):
    config = ExperimentConfig.from_dict({
        "benchmark": "delay-integral", "grid": {"N": 10}, "mc": {"n_paths": 300}, "output_dir": str(tmp_path),
    })
    result = check_determinism(config, (1, 4))
    assert result["identical"]
    assert set(result["digests"]) == {1, 4}


def test_semigroup_check_catches_off_by_one(monkeypatch):
    def shifted_one_step_too_far(x, s):
        grid = x.grid
        return shift(x, grid.time(min(grid.index_of(s) + 1, grid.n_steps)))

    rows = {r["name"]: r for r in exact_algebra(SUITES["fast"], WorkerPool(1))}
    assert all(r["ok"] for r in rows.values())
    monkeypatch.setattr("bench.acceptance.shift", shifted_one_step_too_far)
    rows = {r["name"]: r for r in exact_algebra(SUITES["fast"], WorkerPool(1))}
    assert not rows["semigroup_law"]["ok"]
    assert rows["restrict_extend_identity"]["ok"]


def test_accept_scorecard(tmp_path):
    scorecard = accept("fast", output_dir=str(tmp_path), only=[1, 10], pool=WorkerPool(2))
    assert set(scorecard["criterion"]) == {1, 10}
    assert scorecard["ok"].all()
    assert (tmp_path / "scorecard-fast.csv").exists()
    with pytest.raises(ValueError):
        accept("medium")


def test_cli(tmp_path):
    assert main.main(["bench", "list"]) == 0
    bad = tmp_path / "bad.toml"
    bad.write_text("benchmark = 'nope'\n")
    assert main.main(["run", "--config", str(bad)]) == 1
    good = tmp_path / "good.toml"
    good.write_text(
        "benchmark = 'martingale-present'\n"
        f"output_dir = '{tmp_path / 'run'}'\n"
        "[mc]\nn_paths = 300\n"
    )
    assert main.main(["run", "--config", str(good)]) in (0, 2)
    assert (tmp_path / "run" / "report.json").exists()
    assert main.main(["accept", "--only", "10", "--out", str(tmp_path / "accept")]) == 0
    with pytest.raises(SystemExit):
        main.main(["bench"])
