"""
Runs one ExperimentConfig: dispatches on the mode, collects a JSON payload, CSV tables and
pass/fail checks, and writes them under the output directory. The payload holds no timings
or thread counts, so rerunning a config reproduces it byte for byte.
"""
import hashlib
import json
import time
import typing as t
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from common.colors import get_logger
from common.config import REPO_ROOT
from common.pool import WorkerPool
from segment import LiftedState, PathGrid, SampledPath, present_direction
from forward import (
    CoefficientSet, NoiseSpec, check_coefficients, moment_statistic, simulate_forward, simulate_unlifted,
    variational_flow, write_snapshot,
)
from forward.module import ensemble_frame
from bsde import export_solution, solve_bsde, solve_first_derivative_bsde
from calculus import (
    ValueEstimate, ValueQuery, default_eps, directional_derivative, flow_property_gap, pde_residual,
    solve_value, value, z_identification_gap,
)
from mollify import MollifierConfig, approximate_coefficients, one_jump_gap, smoothing_report
from control import closed_loop, cost, fundamental_relation_audit, solve_hjb_adaptive
from bench import experiment as ex
from bench.experiment import ExperimentConfig

logger = get_logger(__name__)

REPORT_FILE = "report.json"
PAYLOAD_FILE = "payload.json"


def build_id() -> str:
    """Commit of the working tree, suffixed with -dirty for local changes; 'unknown' outside git."""
    try:
        import git
    except ImportError:
        return "unknown"
    try:
        repo = git.Repo(REPO_ROOT, search_parent_directories=True)
        sha = repo.head.commit.hexsha
        return f"{sha}-dirty" if repo.is_dirty() else sha
    except (git.InvalidGitRepositoryError, git.NoSuchPathError, ValueError):
        return "unknown"


def to_jsonable(obj: t.Any) -> t.Any:
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def dumps(obj: t.Any) -> str:
    return json.dumps(to_jsonable(obj), indent=2, sort_keys=True)


def check(name: str, value: float, threshold: float, ok: t.Optional[bool] = None) -> t.Dict[str, t.Any]:
    """A pass/fail row; ok defaults to |value| <= threshold."""
    value, threshold = float(value), float(threshold)
    return {"name": name, "value": value, "threshold": threshold, "ok": bool(abs(value) <= threshold if ok is None else ok)}


@dataclass(eq=False)
class RunReport:
    config: t.Dict[str, t.Any]
    build_id: str
    seed: int
    wall_time: float
    payload: t.Dict[str, t.Any]
    checks: t.List[t.Dict[str, t.Any]] = field(default_factory=list)
    tables: t.Dict[str, pd.DataFrame] = field(default_factory=dict, repr=False)
    output_dir: t.Optional[Path] = None

    @property
    def passed(self) -> bool:
        return all(c["ok"] for c in self.checks)

    def payload_bytes(self) -> bytes:
        return dumps({"payload": self.payload, "checks": self.checks}).encode()

    def to_dict(self) -> t.Dict[str, t.Any]:
        return {
            "config": self.config,
            "build_id": self.build_id,
            "seed": self.seed,
            "wall_time": self.wall_time,
            "payload": self.payload,
            "checks": self.checks,
            "tables": sorted(self.tables),
        }

    def write(self, output_dir: t.Union[str, Path]) -> Path:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / REPORT_FILE).write_text(dumps(self.to_dict()))
        (out / PAYLOAD_FILE).write_bytes(self.payload_bytes())
        for name, table in self.tables.items():
            table.to_csv(out / f"{name}.csv", index=False)
        return out


@dataclass(eq=False)
class RunContext:
    config: ExperimentConfig
    grid: PathGrid
    coeffs: CoefficientSet
    mc: NoiseSpec
    x0: LiftedState
    pool: WorkerPool
    out: Path
    payload: t.Dict[str, t.Any] = field(default_factory=dict)
    checks: t.List[t.Dict[str, t.Any]] = field(default_factory=list)
    tables: t.Dict[str, pd.DataFrame] = field(default_factory=dict)

    @property
    def bench(self):
        return self.config.entry()

    def query(self, coeffs: t.Optional[CoefficientSet] = None) -> ValueQuery:
        return ValueQuery(self.config.t0, self.x0, coeffs or self.coeffs, self.mc, self.config.basis(self.grid, self.x0.d))

    def expected(self) -> t.Optional[float]:
        return self.bench.expectation(self.grid, self.config.t0, self.x0, self.mc, self.config.params)


def _difference(a: ValueEstimate, b: ValueEstimate) -> ValueEstimate:
    samples = a.samples - b.samples
    return ValueEstimate(float(a.mean - b.mean), float(np.std(samples, ddof=1) / np.sqrt(len(samples))), len(samples), samples)


def _expectation_check(ctx: RunContext, estimate: ValueEstimate, name: str = "closed_form"):
    expected = ctx.expected()
    if expected is None:
        return
    ctx.payload["expected"] = expected
    tol = ctx.bench.tolerance(ctx.grid, expected, estimate.std_error)
    ctx.checks.append(check(name, estimate.mean - expected, tol))


def run_forward(ctx: RunContext):
    cfg, coeffs = ctx.config, ctx.coeffs
    ensemble = simulate_forward(coeffs, cfg.t0, ctx.x0, ctx.mc, pool=ctx.pool)
    terminal = ensemble.presents[:, -1, :]
    write_snapshot(ensemble, str(ctx.out / "ensemble.feather"))
    ctx.payload.update({
        "n_paths": ensemble.n_paths,
        "n_steps": ensemble.n_steps,
        "terminal_mean": terminal.mean(axis=0),
        "terminal_std": terminal.std(axis=0, ddof=1),
        "moment_2": moment_statistic(ensemble, 2.0),
        "coefficient_checks": check_coefficients(coeffs, ensemble.terminal_state(), cfg.horizon_T),
        "snapshot": "ensemble.feather",
    })
    frame = ensemble_frame(ensemble)
    limit = cfg.options.get("export_paths", 0)
    ctx.tables["ensemble"] = frame[frame["path"] < limit] if limit else frame
    constant = np.all(ctx.x0.past == ctx.x0.present)
    if coeffs.drift is not None and cfg.t0 == 0.0 and constant:
        gamma = SampledPath(0.0, ctx.x0.present[None, :], ctx.grid)
        xi = simulate_unlifted(coeffs, gamma, ctx.mc, pool=ctx.pool)
        same = bool(np.array_equal(xi, ensemble.presents))
        ctx.checks.append(check("lift_unlift_max_diff", np.max(np.abs(xi - ensemble.presents)), 0.0, same))
    if coeffs.driver_is_zero and ctx.bench.problem is None:
        phi = coeffs.Phi(ensemble.terminal_state()).copy()
        estimate = ValueEstimate(float(phi.mean()), float(np.std(phi, ddof=1) / np.sqrt(len(phi))), len(phi), phi)
        ctx.payload["terminal_cost"] = estimate.to_dict()
        _expectation_check(ctx, estimate)


def run_value(ctx: RunContext):
    q = ctx.query()
    if ctx.coeffs.driver_is_zero:
        estimate, solution = value(q, ctx.pool), None
    else:
        estimate, solution = solve_value(q, ctx.pool)
    ctx.payload["estimate"] = estimate.to_dict()
    if solution is not None:
        export_solution(solution, str(ctx.out / "solution.csv"), str(ctx.out / "regression.json"))
        ctx.payload["bsde"] = {
            "scheme": solution.scheme,
            "basis": solution.basis.describe(),
            "z0": solution.z0,
            "max_abs_z": solution.max_abs_z,
            "z_bound": solution.check_z_bound(),
        }
        ctx.tables["regression"] = pd.DataFrame(solution.diagnostics())
        bound = solution.check_z_bound()
        if bound is not None:
            ctx.checks.append(check("z_bound", bound["max_abs_z"], bound["bound"], bound["ok"]))
    _expectation_check(ctx, estimate)


def run_residual(ctx: RunContext):
    cfg = ctx.config
    levels = cfg.options.get("levels", [cfg.n_steps])
    profile = cfg.smooth_profile()
    base_eps = cfg.eps if cfg.eps is not None else default_eps(ctx.x0)
    reports = []
    for i, n in enumerate(levels):
        grid = cfg.grid(n)
        coeffs = cfg.coefficients(grid)
        mc = cfg.noise(grid)
        report = pde_residual(
            cfg.t0, profile, coeffs, mc, cfg.basis(grid, ctx.x0.d),
            eps=base_eps / 2 ** i, eps2=cfg.eps2, pool=ctx.pool,
        )
        reports.append(report)
    ctx.payload["levels"] = [r.to_dict() for r in reports]
    ctx.tables["residual"] = pd.DataFrame([{
        "N": r.grid["N"], "eps": r.stencil_eps["eps"], "eps2": r.stencil_eps["eps2"],
        "residual": r.residual, "error_budget": r.error_budget,
    } for r in reports])
    if ctx.bench.closed_form is not None:
        for r in reports:
            ctx.checks.append(check(f"residual_N{r.grid['N']}", r.residual, 3.0 * r.error_budget))
    for prev, cur in zip(reports, reports[1:]):
        slack = abs(prev.residual) + 2.0 * cur.error_budget
        ctx.checks.append(check(f"residual_trend_N{cur.grid['N']}", cur.residual, slack))


def _direction(ctx: RunContext) -> LiftedState:
    ones = np.ones(ctx.x0.d)
    if ctx.config.options.get("direction", "present") == "present":
        return present_direction(ctx.grid, ones)
    return LiftedState(np.zeros(ctx.x0.d), np.tile(ones, (ctx.grid.n_steps, 1)), ctx.grid)


def run_derivative(ctx: RunContext):
    cfg, q = ctx.config, ctx.query()
    h = _direction(ctx)
    stencil = directional_derivative(q, h, cfg.eps, ctx.pool)
    ensemble = simulate_forward(ctx.coeffs, cfg.t0, ctx.x0, ctx.mc, pool=ctx.pool)
    base = solve_bsde(ensemble, ctx.coeffs, q.basis)
    flow = variational_flow(ctx.coeffs, ensemble, h, ctx.pool)
    derivative = solve_first_derivative_bsde(ensemble, ctx.coeffs, flow, base, q.basis)
    combined = float(np.sqrt(stencil.std_error ** 2 + derivative.std_error ** 2))
    gap = stencil.mean - derivative.value
    z_gaps = z_identification_gap(q, cfg.options.get("interior_times", []), cfg.eps, ctx.pool)
    ctx.payload.update({
        "direction": cfg.options.get("direction", "present"),
        "stencil": stencil.to_dict(),
        "derivative_bsde": {"value": derivative.value, "std_error": derivative.std_error},
        "gap": gap,
        "z_identification": [asdict(z) for z in z_gaps],
    })
    ctx.tables["z_identification"] = pd.DataFrame([asdict(z) for z in z_gaps])
    ctx.checks.append(check("stencil_vs_derivative_bsde", gap, max(3.0 * combined, 0.02 * (1.0 + abs(stencil.mean)))))
    ctx.checks.append(check("z_identification_t0", z_gaps[0].rel_gap, 0.05))


def run_mollify(ctx: RunContext):
    cfg = ctx.config
    n_list = cfg.options.get("n_list", list(ex.DEFAULT_N_LIST))
    report = smoothing_report(ctx.x0, n_list)
    report["mass"] = [MollifierConfig.from_config(n).mass() for n in n_list]
    gaps = one_jump_gap(ctx.coeffs, ctx.x0, n_list, time=cfg.t0)
    q = ctx.query()
    base = value(q, ctx.pool)
    rows = []
    for n in n_list:
        smoothed = approximate_coefficients(ctx.coeffs, MollifierConfig.from_config(n))
        approx = value(replace(q, coeffs=smoothed), ctx.pool)
        diff = _difference(approx, base)
        rows.append({"n": n, "u_n": approx.mean, "gap": abs(diff.mean), "std_error": diff.std_error})
    end_to_end = pd.DataFrame(rows)
    ctx.payload.update({
        "u": base.to_dict(),
        "smoothing": report.to_dict(orient="records"),
        "one_jump": gaps.to_dict(orient="records"),
        "end_to_end": rows,
    })
    ctx.tables.update({"smoothing": report, "one_jump": gaps, "end_to_end": end_to_end})
    for n, mass in zip(n_list, report["mass"]):
        ctx.checks.append(check(f"mass_n{n}", mass - 1.0, 1e-10))
    errors = report["sup_error"].tolist()
    for n, prev, cur in zip(n_list[1:], errors, errors[1:]):
        ctx.checks.append(check(f"sup_error_decreasing_n{n}", cur, prev, cur < prev))
    ctx.checks.append(check("boundedness_ratio", report["boundedness_ratio"].max(), 1.05))
    for prev, cur in zip(rows, rows[1:]):
        ctx.checks.append(check(f"end_to_end_n{cur['n']}", cur["gap"], prev["gap"] + 3.0 * cur["std_error"]))


def run_control(ctx: RunContext):
    cfg, coeffs = ctx.config, ctx.coeffs
    p = ctx.bench.control_problem(ctx.grid, cfg.params)
    basis = cfg.basis(ctx.grid, ctx.x0.d)
    hjb = solve_hjb_adaptive(p, cfg.t0, ctx.x0, coeffs, ctx.mc, basis, M=cfg.options.get("M"), pool=ctx.pool)
    fresh = ctx.mc.with_seed(cfg.options.get("fresh_seed", cfg.seed + 1))
    loop = closed_loop(p, cfg.t0, ctx.x0, hjb.policy, coeffs, fresh, ctx.pool)
    zero = cost(p, cfg.t0, ctx.x0, np.zeros(p.d1), coeffs, fresh, ctx.pool)
    audits = [("policy", fundamental_relation_audit(p, cfg.t0, ctx.x0, hjb.policy, hjb, coeffs, fresh, ctx.pool))]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, p.d1]))
    limit = p.control_bound if p.control_bound is not None else 1.0
    for i in range(cfg.options.get("n_random_controls", 10)):
        u = rng.uniform(-limit, limit, size=p.d1)
        if np.linalg.norm(u) > limit:
            u = u * limit / np.linalg.norm(u)
        audits.append((f"constant_{i}", fundamental_relation_audit(p, cfg.t0, ctx.x0, u, hjb, coeffs, fresh, ctx.pool)))
    v = hjb.value
    ctx.payload.update({
        "value": v.to_dict(),
        "M": hjb.M,
        "max_abs_z": hjb.max_abs_z,
        "u_max": hjb.policy.u_max,
        "closed_loop": {**loop.cost.to_dict(), "extrapolation_fraction": loop.extrapolation_fraction},
        "cost_zero": zero.to_dict(),
        "audits": {label: asdict(a) for label, a in audits},
    })
    ctx.tables["audit"] = pd.DataFrame([{"control": label, **asdict(a)} for label, a in audits])
    _expectation_check(ctx, v)
    combined = float(np.sqrt(v.std_error ** 2 + loop.cost.std_error ** 2))
    ctx.checks.append(check("closed_loop_cost", loop.cost.mean - v.mean, max(3.0 * combined, 0.02 * abs(v.mean))))
    zero_se = float(np.sqrt(v.std_error ** 2 + zero.std_error ** 2))
    ctx.checks.append(check("value_below_zero_control_cost", v.mean - zero.mean, 3.0 * zero_se, v.mean <= zero.mean + 3.0 * zero_se))
    for label, audit in audits:
        if label == "policy":
            ctx.checks.append(check("policy_gap", audit.gap, 3.0 * audit.gap_std_error + 1e-9 * (1.0 + abs(v.mean))))
        else:
            ctx.checks.append(check(f"{label}_gap", audit.gap, 3.0 * audit.gap_std_error, audit.gap <= 3.0 * audit.gap_std_error + 1e-12))


def run_flow(ctx: RunContext):
    cfg = ctx.config
    k0 = ctx.grid.index_of(cfg.t0)
    t1 = cfg.options.get("t1", ctx.grid.time(k0 + max(1, (ctx.grid.n_steps - k0) // 4)))
    result = flow_property_gap(
        cfg.t0, t1, ctx.x0, ctx.coeffs, ctx.mc, cfg.basis(ctx.grid, ctx.x0.d),
        mode=cfg.options.get("mode", "nested"), n_outer=cfg.options.get("n_outer"),
        n_inner=cfg.options.get("n_inner"), pool=ctx.pool,
    )
    ctx.payload.update({"t1": t1, **asdict(result)})
    ctx.checks.append(check("flow_gap", result.gap, max(3.0 * result.std_error, 0.02 * abs(result.u0))))


MODE_RUNNERS: t.Dict[str, t.Callable[[RunContext], None]] = {
    ex.FORWARD: run_forward,
    ex.VALUE: run_value,
    ex.RESIDUAL: run_residual,
    ex.DERIVATIVE: run_derivative,
    ex.MOLLIFY: run_mollify,
    ex.CONTROL: run_control,
    ex.FLOW: run_flow,
}


def run(
        config: ExperimentConfig,
        seed: t.Optional[int] = None,
        output_dir: t.Optional[str] = None,
        pool: t.Optional[WorkerPool] = None,
    ) -> RunReport:
    """Run the mode named by the config and write report.json, payload.json and the CSV tables."""
    if seed is not None:
        config = config.with_seed(seed)
    if output_dir is not None:
        config = config.with_output(output_dir)
    out = Path(config.output_dir)
    if not out.is_absolute():
        out = REPO_ROOT / out
    out.mkdir(parents=True, exist_ok=True)
    grid = config.grid()
    ctx = RunContext(
        config=config, grid=grid, coeffs=config.coefficients(grid), mc=config.noise(grid),
        x0=config.initial_state(grid), pool=pool or WorkerPool(), out=out,
    )
    logger.info(f"Running '{config.benchmark}' in mode '{config.mode}' (seed {config.seed}, {config.n_paths} paths)")
    start = time.perf_counter()
    MODE_RUNNERS[config.mode](ctx)
    wall_time = time.perf_counter() - start
    report = RunReport(
        config=config.to_dict(), build_id=build_id(), seed=config.seed, wall_time=wall_time,
        payload=ctx.payload, checks=ctx.checks, tables=ctx.tables, output_dir=out,
    )
    report.write(out)
    failed = [c["name"] for c in report.checks if not c["ok"]]
    if failed:
        logger.warning(f"'{config.benchmark}' ({config.mode}): failed checks {failed}")
    return report


def check_determinism(config: ExperimentConfig, threads: t.Sequence[int] = (1, 8)) -> t.Dict[str, t.Any]:
    """Rerun under each worker count and compare the payload bytes."""
    digests = {}
    for n in threads:
        report = run(config, output_dir=str(Path(config.output_dir) / f"threads-{n}"), pool=WorkerPool(n))
        digests[n] = hashlib.sha1(report.payload_bytes()).hexdigest()
    identical = len(set(digests.values())) == 1
    if not identical:
        logger.warning(f"payload of '{config.benchmark}' ({config.mode}) depends on the thread count: {digests}")
    return {"digests": digests, "identical": identical}
