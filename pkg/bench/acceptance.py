"""
Acceptance suite: closed-form oracles, exact identities and refinement trends, one scorecard
row per check. The fast suite runs on a quarter of the paths with tolerances doubled.
"""
import time
import typing as t
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd

from common.colors import get_logger
from common.config import CONFIG
from common.errors import PathflowError
from common.pool import WorkerPool
from segment import (
    LiftedState, PathGrid, SampledPath, extend, l2_norm, restrict, shift, sup_norm,
)
from forward import NoiseSpec, lift_path, simulate_forward, simulate_unlifted
from calculus import ValueQuery, flow_property_gap, pde_residual, solve_value, value, z_identification_gap
from mollify import MollifierConfig, approximate_coefficients, smoothing_report
from control import (
    ControlProblem, closed_loop, cost, fundamental_relation_audit, hamiltonian,
    solve_hjb_adaptive,
)
from bench.experiment import ExperimentConfig
from bench.registry import cosine_profile, get_benchmark
from bench.runner import check, check_determinism

logger = get_logger(__name__)


@dataclass(frozen=True)
class Suite:
    name: str
    path_scale: float
    widen: float
    output_dir: t.Optional[Path] = None

    def paths(self, n: int, minimum: int = 150) -> int:
        return max(minimum, int(n * self.path_scale))


SUITES = {
    "fast": Suite("fast", 0.25, 2.0),
    "full": Suite("full", 1.0, 1.0),
}

CriterionFn = t.Callable[[Suite, WorkerPool], t.List[t.Dict[str, t.Any]]]
CRITERIA: t.List[t.Tuple[int, str, CriterionFn]] = []


def criterion(number: int, title: str):
    def register(fn: CriterionFn) -> CriterionFn:
        CRITERIA.append((number, title, fn))
        return fn
    return register


def _setup(name: str, n_steps: int, n_paths: int, seed: int = 11, horizon_T: float = 1.0, **params):
    bench = get_benchmark(name)
    grid = PathGrid(horizon_T, n_steps)
    coeffs = bench.coefficients(grid, params)
    x0 = bench.initial_state(grid, params)
    mc = NoiseSpec(seed, n_paths, coeffs.d1, grid)
    return bench, grid, coeffs, x0, mc


@criterion(1, "exact algebra")
def exact_algebra(suite: Suite, pool: WorkerPool) -> t.List[t.Dict[str, t.Any]]:
    rng = np.random.default_rng(1)
    restrict_fail = 0
    for _ in range(100):
        grid = PathGrid(float(rng.uniform(0.5, 2.0)), int(rng.integers(2, 65)))
        k = int(rng.integers(0, grid.n_steps + 1))
        gamma = SampledPath(grid.time(k), rng.normal(size=(k + 1, int(rng.integers(1, 3)))), grid)
        back = restrict(extend(gamma, grid), gamma.t_end)
        restrict_fail += not np.array_equal(back.samples, gamma.samples)
    semigroup_fail, embedding_fail = 0, 0
    for _ in range(100):
        grid = PathGrid(float(rng.uniform(0.5, 2.0)), int(rng.integers(2, 17)))
        d = int(rng.integers(1, 3))
        x = LiftedState(rng.normal(size=d), rng.normal(size=(grid.n_steps, d)), grid)
        for i in range(grid.n_steps + 1):
            once = shift(x, grid.time(i))
            for j in range(grid.n_steps + 1 - i):
                twice = shift(once, grid.time(j))
                direct = shift(x, grid.time(i + j))
                semigroup_fail += not (np.array_equal(twice.past, direct.past) and np.array_equal(twice.present, direct.present))
        embedding_fail += l2_norm(x) > np.sqrt(1.0 + grid.horizon_T) * sup_norm(x) * (1 + 1e-12)
    return [
        check("restrict_extend_identity", restrict_fail, 0),
        check("semigroup_law", semigroup_fail, 0),
        check("norm_embedding", embedding_fail, 0),
    ]


@criterion(2, "lift/unlift equivalence")
def lift_unlift(suite: Suite, pool: WorkerPool) -> t.List[t.Dict[str, t.Any]]:
    _, grid, coeffs, x0, mc = _setup("point-delay", 64, 1000, sigma=1.0)
    gamma = SampledPath(0.0, x0.present[None, :], grid)
    ensemble = simulate_forward(coeffs, 0.0, lift_path(gamma), mc, pool=pool)
    xi = simulate_unlifted(coeffs, gamma, mc, pool=pool)
    prefix_fail = 0
    for k in (0, grid.n_steps // 3, grid.n_steps):
        state = ensemble.state(k)
        back = extend(restrict(state, grid.time(k)), grid)
        prefix_fail += not (np.array_equal(back.past, state.past) and np.array_equal(back.present, state.present))
    return [
        check("presents_bit_equal", np.max(np.abs(xi - ensemble.presents)), 0.0, bool(np.array_equal(xi, ensemble.presents))),
        check("prefix_identity", prefix_fail, 0),
    ]


@criterion(3, "Gaussian value oracle")
def gaussian_value(suite: Suite, pool: WorkerPool) -> t.List[t.Dict[str, t.Any]]:
    bench, grid, coeffs, x0, mc = _setup("heat-present-square", 20, suite.paths(10_000))
    estimate = value(ValueQuery(0.0, x0, coeffs, mc), pool)
    expected = bench.expectation(grid, 0.0, x0, mc)
    return [
        check("heat_value", estimate.mean - expected, 3.0 * estimate.std_error * suite.widen),
        check("heat_std_error", estimate.std_error, 0.03 * suite.widen),
    ]


@criterion(4, "linear BSDE cross-solver")
def linear_cross_solver(suite: Suite, pool: WorkerPool) -> t.List[t.Dict[str, t.Any]]:
    bench, grid, coeffs, x0, mc = _setup("linear-bsde", 50, suite.paths(10_000))
    estimate, _ = solve_value(ValueQuery(0.0, x0, coeffs, mc), pool)
    oracle = bench.expectation(grid, 0.0, x0, mc)
    tol = max(3.0 * estimate.std_error, 0.25 * grid.dt * abs(oracle)) * suite.widen
    return [check("regression_vs_gamma_oracle", estimate.mean - oracle, tol)]


@criterion(5, "exponential-driver oracle")
def exponential_driver(suite: Suite, pool: WorkerPool) -> t.List[t.Dict[str, t.Any]]:
    _, grid, coeffs, x0, mc = _setup("exponential-driver", 50, suite.paths(10_000))
    estimate, _ = solve_value(ValueQuery(0.0, x0, coeffs, mc), pool)
    expected = float(np.exp(0.5))
    tol = max(3.0 * estimate.std_error, 0.01 * expected) * suite.widen
    return [check("exponential_y0", estimate.mean - expected, tol)]


@criterion(6, "Z-identification")
def z_identification(suite: Suite, pool: WorkerPool) -> t.List[t.Dict[str, t.Any]]:
    rows, gaps = [], []
    for n_paths in (suite.paths(4000), 4 * suite.paths(4000)):
        _, grid, coeffs, x0, mc = _setup("heat-present-square", 20, n_paths)
        gap = z_identification_gap(ValueQuery(0.0, x0, coeffs, mc), pool=pool)[0]
        gaps.append(gap)
        rows.append(check(f"relative_gap_P{n_paths}", gap.rel_gap, 0.05 * suite.widen))
    small, large = gaps
    # A gap already inside the statistical noise counts as decreased.
    noise = 2.0 * large.std_error / (1.0 + float(np.linalg.norm(large.z_bsde)))
    rows.append(check("gap_decreases", large.rel_gap, small.rel_gap, large.rel_gap < small.rel_gap or large.rel_gap <= noise))
    return rows


@criterion(7, "PDE residual")
def residual(suite: Suite, pool: WorkerPool) -> t.List[t.Dict[str, t.Any]]:
    rows = []
    for name in ("heat-present-square", "exponential-driver"):
        bench, grid, coeffs, x0, mc = _setup(name, 20, suite.paths(10_000))
        report = pde_residual(0.0, bench.default_profile(), coeffs, mc, pool=pool)
        rows.append(check(f"{name}_residual", report.residual, 3.0 * report.error_budget * suite.widen))
    bench = get_benchmark("delay-integral")
    reports, eps = [], None
    for n in (32, 64, 128):
        _, grid, coeffs, x0, mc = _setup("delay-integral", n, suite.paths(4000))
        eps = 1e-3 * (1.0 + float(sup_norm(x0))) if eps is None else eps / 2
        reports.append(pde_residual(0.0, bench.default_profile(), coeffs, mc, eps=eps, pool=pool))
    for prev, cur in zip(reports, reports[1:]):
        rows.append(check(
            f"delay_integral_trend_N{cur.grid['N']}", cur.residual,
            abs(prev.residual) + 2.0 * cur.error_budget * suite.widen,
        ))
    return rows


@criterion(8, "flow property")
def flow_property(suite: Suite, pool: WorkerPool) -> t.List[t.Dict[str, t.Any]]:
    _, grid, coeffs, x0, mc = _setup("delay-integral", 32, suite.paths(4000))
    gap = flow_property_gap(
        0.0, grid.horizon_T / 4, x0, coeffs, mc, mode="nested",
        n_outer=suite.paths(200), n_inner=suite.paths(400, minimum=200), pool=pool,
    )
    return [check("nested_flow_gap", gap.gap, max(3.0 * gap.std_error, 0.02 * abs(gap.u0)) * suite.widen)]


@criterion(9, "mollifier suite")
def mollifier(suite: Suite, pool: WorkerPool) -> t.List[t.Dict[str, t.Any]]:
    n_list = [4, 16, 64]
    rows = [check(f"mass_n{n}", MollifierConfig.from_config(n).mass() - 1.0, 1e-10) for n in n_list]
    grid = PathGrid(1.0, 128)
    decreasing_fail, worst_ratio = 0, 0.0
    for frequency in range(1, 6):
        profile = cosine_profile(0.5, 0.5, float(frequency))
        x = LiftedState(profile.values(np.array([0.0]))[0], profile.values(grid.past_times()), grid)
        report = smoothing_report(x, n_list)
        errors = report["sup_error"].to_numpy()
        decreasing_fail += not np.all(np.diff(errors) < 0)
        worst_ratio = max(worst_ratio, float(report["boundedness_ratio"].max()))
    rows += [check("sup_error_strictly_decreasing", decreasing_fail, 0), check("boundedness_ratio", worst_ratio, 1.05)]
    _, grid, coeffs, x0, mc = _setup("delay-integral", 64, suite.paths(4000))
    q = ValueQuery(0.0, x0, coeffs, mc)
    base = value(q, pool)
    previous = None
    for n in n_list:
        smoothed = value(ValueQuery(0.0, x0, approximate_coefficients(coeffs, MollifierConfig.from_config(n)), mc), pool)
        diff = smoothed.samples - base.samples
        gap, se = abs(float(smoothed.mean - base.mean)), float(np.std(diff, ddof=1) / np.sqrt(len(diff)))
        if previous is not None:
            rows.append(check(f"end_to_end_n{n}", gap, previous + 3.0 * se * suite.widen))
        previous = gap
    return rows


@criterion(10, "Hamiltonian exactness")
def hamiltonian_exactness(suite: Suite, pool: WorkerPool) -> t.List[t.Dict[str, t.Any]]:
    rng = np.random.default_rng(10)
    numeric = ControlProblem(
        control_Q=lambda u: 0.5 * np.sum(u ** 2, axis=-1), terminal_Upsilon=lambda x: x.present[..., 0],
        sigma=np.eye(2), name="numeric-quadratic",
    )
    z = 2.0 * rng.normal(size=(100, 2))
    exact = -0.5 * np.sum(z ** 2, axis=1)
    rel = np.abs(hamiltonian(numeric, z) - exact) / np.maximum(np.abs(exact), 1e-12)
    bound = 1.0
    directions = rng.normal(size=(100, 2))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    z = np.linspace(0.5 * bound, 1.5 * bound, 100)[:, None] * directions
    norms = np.linalg.norm(z, axis=1)
    piecewise = -np.where(norms <= bound, 0.5 * norms ** 2, bound * norms - 0.5 * bound ** 2)
    bounded = replace(numeric, control_bound=bound, name="numeric-quadratic-ball")
    truncated_err = np.abs(hamiltonian(bounded, z) - piecewise).max()
    return [check("numeric_quadratic_relative", rel.max(), 1e-6), check("numeric_truncated_piecewise", truncated_err, 1e-8)]


@criterion(11, "LQ control end-to-end")
def lq_control(suite: Suite, pool: WorkerPool) -> t.List[t.Dict[str, t.Any]]:
    bench, grid, coeffs, x0, mc = _setup("lq-control", 20, suite.paths(10_000))
    q, sigma = bench.params["q"], bench.params["sigma"]
    p = bench.control_problem(grid)
    hjb = solve_hjb_adaptive(p, 0.0, x0, coeffs, mc, bench.regression_basis(grid, x0.d), pool=pool)
    v = hjb.value
    expected = bench.expectation(grid, 0.0, x0, mc)
    fresh = mc.with_seed(mc.seed + 1000)
    loop = closed_loop(p, 0.0, x0, hjb.policy, coeffs, fresh, pool)
    zero = cost(p, 0.0, x0, np.zeros(p.d1), coeffs, fresh, pool)
    w = suite.widen
    rows = [
        check("value_vs_oracle", v.mean - expected, 3.0 * v.std_error * w),
        check("closed_loop_cost", loop.cost.mean - v.mean,
              max(3.0 * np.hypot(v.std_error, loop.cost.std_error), 0.02 * abs(v.mean)) * w),
        check("zero_control_premium", (zero.mean - v.mean) - 0.5 * (sigma * q) ** 2 * grid.horizon_T,
              3.0 * np.hypot(v.std_error, zero.std_error) * w),
    ]
    audit = fundamental_relation_audit(p, 0.0, x0, hjb.policy, hjb, coeffs, fresh, pool)
    rows.append(check("policy_relation_gap", audit.gap, 3.0 * audit.gap_std_error * w + 1e-9))
    rng = np.random.default_rng(11)
    worst = -np.inf
    for u in rng.uniform(-1.0, 1.0, size=(10, p.d1)):
        audit = fundamental_relation_audit(p, 0.0, x0, u, hjb, coeffs, fresh, pool)
        worst = max(worst, audit.gap - 3.0 * audit.gap_std_error * w)
    rows.append(check("constant_control_gaps_nonpositive", worst, 0.0, worst <= 1e-12))
    return rows


def determinism_configs(suite: Suite, output_dir: Path) -> t.List[ExperimentConfig]:
    n = suite.paths(800, minimum=400)
    docs = [
        {"benchmark": "point-delay", "mode": "forward", "params": {"sigma": 1.0}, "grid": {"N": 16}},
        {"benchmark": "heat-present-square", "mode": "value"},
        {"benchmark": "exponential-driver", "mode": "residual"},
        {"benchmark": "heat-present-square", "mode": "derivative"},
        {"benchmark": "mollifier-profiles", "mode": "mollify", "grid": {"N": 64}},
        {"benchmark": "lq-control", "mode": "control", "control": {"n_random_controls": 2}},
        {"benchmark": "delay-integral", "mode": "flow", "flow": {"mode": "decoupling"}},
    ]
    configs = []
    for doc in docs:
        doc = {"grid": {"N": 20}, **doc, "mc": {"seed": 5, "n_paths": n}}
        doc["output_dir"] = str(output_dir / "determinism" / f"{doc['benchmark']}-{doc['mode']}")
        configs.append(ExperimentConfig.from_dict(doc))
    return configs


@criterion(12, "determinism across thread counts")
def determinism(suite: Suite, pool: WorkerPool) -> t.List[t.Dict[str, t.Any]]:
    rows = []
    for config in determinism_configs(suite, suite.output_dir or _output_dir(None)):
        result = check_determinism(config, (1, 8))
        rows.append(check(f"{config.benchmark}_{config.mode}", 0.0, 0.0, result["identical"]))
    return rows


def _output_dir(output_dir: t.Optional[str]) -> Path:
    return Path(output_dir) if output_dir is not None else CONFIG.working_stage / "accept"


def accept(
        suite: str = "fast",
        output_dir: t.Optional[str] = None,
        only: t.Optional[t.Sequence[int]] = None,
        pool: t.Optional[WorkerPool] = None,
    ) -> pd.DataFrame:
    """Run the criteria and write scorecard-<suite>.csv; failures are rows, not exceptions."""
    if suite not in SUITES:
        raise ValueError(f"Unknown suite '{suite}', expected one of {sorted(SUITES)}")
    out = _output_dir(output_dir)
    spec = replace(SUITES[suite], output_dir=out)
    pool = pool or WorkerPool()
    rows = []
    for number, title, fn in CRITERIA:
        if only is not None and number not in only:
            continue
        start = time.perf_counter()
        try:
            results = fn(spec, pool)
            note = ""
        except PathflowError as e:
            logger.error(f"criterion {number} ({title}) raised: {e}")
            results = [check("error", np.nan, np.nan, False)]
            note = f"{type(e).__name__}: {e}"
        seconds = time.perf_counter() - start
        for row in results:
            rows.append({"criterion": number, "title": title, "check": row["name"], "value": row["value"],
                         "threshold": row["threshold"], "ok": row["ok"], "seconds": seconds, "note": note})
        logger.info(f"criterion {number} ({title}): {'pass' if all(r['ok'] for r in results) else 'FAIL'} in {seconds:.1f}s")
    scorecard = pd.DataFrame(rows, columns=["criterion", "title", "check", "value", "threshold", "ok", "seconds", "note"])
    out.mkdir(parents=True, exist_ok=True)
    scorecard.to_csv(out / f"scorecard-{suite}.csv", index=False)
    return scorecard
