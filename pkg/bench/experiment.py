"""
Experiment documents: one TOML file per run, parsed and validated into an ExperimentConfig.
The field reference lives in docs/formats.md and configs/schemas/experiment.schema.json.
"""
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import typing as t
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from common.errors import ConfigInvalid, NonGridTime
from segment import LiftedState, PathGrid, SmoothProfile, sample_profile
from forward import CoefficientSet, NoiseSpec
from bsde import RegressionBasis
from bench.registry import Benchmark, constant_profile, cosine_profile, get_benchmark

FORWARD = "forward"
VALUE = "value"
RESIDUAL = "residual"
DERIVATIVE = "derivative"
MOLLIFY = "mollify"
CONTROL = "control"
FLOW = "flow"
MODES = (FORWARD, VALUE, RESIDUAL, DERIVATIVE, MOLLIFY, CONTROL, FLOW)

SECTIONS = {"benchmark", "mode", "output_dir", "grid", "mc", "basis", "query", "stencil", "params"} | set(MODES)
BASIS_KINDS = ("auto", "default", "present")
PROFILES = ("benchmark", "constant", "cosine")
DIRECTIONS = ("present", "past")
FLOW_MODES = ("decoupling", "nested")
DEFAULT_N_LIST = (4, 16, 64)


def _number(name: str, value: t.Any, positive: bool = True, allow_zero: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not np.isfinite(value):
        raise ConfigInvalid(name, f"expected a finite number, got {value!r}")
    if positive and (value < 0 or (value == 0 and not allow_zero)):
        raise ConfigInvalid(name, f"must be {'non-negative' if allow_zero else 'positive'}, got {value!r}")
    return float(value)


def _integer(name: str, value: t.Any, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigInvalid(name, f"expected an integer, got {value!r}")
    if value < minimum:
        raise ConfigInvalid(name, f"must be >= {minimum}, got {value}")
    return value


def _choice(name: str, value: t.Any, choices: t.Sequence[str]) -> str:
    if value not in choices:
        raise ConfigInvalid(name, f"expected one of {list(choices)}, got {value!r}")
    return value


def _table(raw: t.Dict[str, t.Any], name: str, keys: t.Set[str]) -> t.Dict[str, t.Any]:
    table = raw.get(name, {})
    if not isinstance(table, dict):
        raise ConfigInvalid(name, "expected a table")
    unknown = set(table) - keys
    if unknown:
        raise ConfigInvalid(f"{name}.{sorted(unknown)[0]}", "unknown field")
    return table


def _grid_time(name: str, grid: PathGrid, time: float) -> float:
    try:
        grid.index_of(time)
    except NonGridTime as e:
        raise ConfigInvalid(name, str(e)) from e
    return time


@dataclass(frozen=True)
class ExperimentConfig:
    benchmark: str
    mode: str
    horizon_T: float
    n_steps: int
    seed: int
    n_paths: int
    t0: float = 0.0
    # Constant initial state; None falls back to the profile.
    x0: t.Optional[float] = None
    profile: str = "benchmark"
    basis_kind: str = "auto"
    degree: t.Optional[int] = None
    ridge_lambda: t.Optional[float] = None
    eps: t.Optional[float] = None
    eps2: t.Optional[float] = None
    output_dir: str = "working_stage/runs"
    params: t.Dict[str, float] = field(default_factory=dict)
    # The table named after the mode, validated per mode.
    options: t.Dict[str, t.Any] = field(default_factory=dict)

    @staticmethod
    def from_dict(raw: t.Dict[str, t.Any]) -> "ExperimentConfig":
        unknown = set(raw) - SECTIONS
        if unknown:
            raise ConfigInvalid(sorted(unknown)[0], "unknown field")
        if "benchmark" not in raw:
            raise ConfigInvalid("benchmark", "missing")
        bench = get_benchmark(raw["benchmark"])
        mode = _choice("mode", raw.get("mode", VALUE), MODES)
        stray = sorted(set(raw) & set(MODES) - {mode})
        if stray:
            raise ConfigInvalid(stray[0], f"table applies to mode '{stray[0]}', not '{mode}'")
        grid_t = _table(raw, "grid", {"T", "N"})
        mc = _table(raw, "mc", {"seed", "n_paths"})
        basis = _table(raw, "basis", {"kind", "degree", "ridge_lambda"})
        query = _table(raw, "query", {"t0", "x0", "profile"})
        stencil = _table(raw, "stencil", {"eps", "eps2"})
        params = _table(raw, "params", set(bench.params))
        for key, val in params.items():
            _number(f"params.{key}", val, positive=False)
        output_dir = raw.get("output_dir", "working_stage/runs")
        if not isinstance(output_dir, str) or not output_dir:
            raise ConfigInvalid("output_dir", "expected a non-empty path")
        config = ExperimentConfig(
            benchmark=bench.name,
            mode=mode,
            horizon_T=_number("grid.T", grid_t.get("T", 1.0)),
            n_steps=_integer("grid.N", grid_t.get("N", 20), minimum=2),
            seed=_integer("mc.seed", mc.get("seed", 0), minimum=0),
            n_paths=_integer("mc.n_paths", mc.get("n_paths", 1000), minimum=2),
            t0=_number("query.t0", query.get("t0", 0.0), allow_zero=True),
            x0=None if "x0" not in query else _number("query.x0", query["x0"], positive=False),
            profile=_choice("query.profile", query.get("profile", "benchmark"), PROFILES),
            basis_kind=_choice("basis.kind", basis.get("kind", "auto"), BASIS_KINDS),
            degree=None if "degree" not in basis else _integer("basis.degree", basis["degree"]),
            ridge_lambda=None if "ridge_lambda" not in basis else _number("basis.ridge_lambda", basis["ridge_lambda"], allow_zero=True),
            eps=None if "eps" not in stencil else _number("stencil.eps", stencil["eps"]),
            eps2=None if "eps2" not in stencil else _number("stencil.eps2", stencil["eps2"]),
            output_dir=output_dir,
            params=dict(params),
            options=dict(_table(raw, mode, set(MODE_OPTIONS[mode]))),
        )
        config.validate()
        return config

    def validate(self):
        grid = self.grid()
        _grid_time("query.t0", grid, self.t0)
        if self.profile == "constant" and self.x0 is None:
            raise ConfigInvalid("query.x0", "profile 'constant' needs x0")
        bench = self.entry()
        try:
            bench.coefficients(grid, self.params)
        except NonGridTime as e:
            raise ConfigInvalid("params", f"benchmark parameters do not fit the grid: {e}") from e
        for key, check in MODE_OPTIONS[self.mode].items():
            if key in self.options:
                check(self, f"{self.mode}.{key}", self.options[key])
        if self.mode == CONTROL and bench.problem is None:
            raise ConfigInvalid("mode", f"benchmark '{bench.name}' has no control problem")
        if self.mode == MOLLIFY and "n_list" not in self.options:
            _check_n_list(self, "mollify.n_list", list(DEFAULT_N_LIST))
        if self.mode not in (FORWARD, VALUE) and self.t0 >= self.horizon_T:
            raise ConfigInvalid("query.t0", f"mode '{self.mode}' needs t0 < T")

    def entry(self) -> Benchmark:
        return get_benchmark(self.benchmark)

    def grid(self, n_steps: t.Optional[int] = None) -> PathGrid:
        return PathGrid(self.horizon_T, self.n_steps if n_steps is None else n_steps)

    def noise(self, grid: t.Optional[PathGrid] = None, seed: t.Optional[int] = None) -> NoiseSpec:
        coeffs = self.coefficients(grid)
        return NoiseSpec(self.seed if seed is None else seed, self.n_paths, coeffs.d1, grid or self.grid())

    def coefficients(self, grid: t.Optional[PathGrid] = None) -> CoefficientSet:
        return self.entry().coefficients(grid or self.grid(), self.params)

    def smooth_profile(self) -> SmoothProfile:
        if self.x0 is not None and self.profile in ("benchmark", "constant"):
            return constant_profile(self.x0)
        if self.profile == "cosine":
            return cosine_profile()
        return self.entry().default_profile(self.params)

    def initial_state(self, grid: t.Optional[PathGrid] = None) -> LiftedState:
        return sample_profile(self.smooth_profile(), grid or self.grid())[0]

    def basis(self, grid: t.Optional[PathGrid] = None, d: int = 1) -> t.Optional[RegressionBasis]:
        """None defers to RegressionBasis.default inside the solvers."""
        grid = grid or self.grid()
        kind = self.basis_kind
        if kind == "auto":
            preferred = self.entry().regression_basis(grid, d)
            if preferred is not None and self.degree is None and self.ridge_lambda is None:
                return preferred
            kind = "present" if preferred is not None else "default"
        if kind == "present":
            return RegressionBasis.present_only(
                d, degree=self.degree or 1, ridge_lambda=1e-8 if self.ridge_lambda is None else self.ridge_lambda,
            )
        if self.degree is None and self.ridge_lambda is None:
            return None
        return RegressionBasis.default(grid, d, self.degree, self.ridge_lambda)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=_integer("mc.seed", seed, minimum=0))

    def with_output(self, output_dir: str) -> "ExperimentConfig":
        return replace(self, output_dir=output_dir)

    def to_dict(self) -> t.Dict[str, t.Any]:
        """Config echo in document layout; from_dict(to_dict()) round-trips."""
        flat = asdict(self)
        doc: t.Dict[str, t.Any] = {
            "benchmark": flat["benchmark"],
            "mode": flat["mode"],
            "output_dir": flat["output_dir"],
            "grid": {"T": flat["horizon_T"], "N": flat["n_steps"]},
            "mc": {"seed": flat["seed"], "n_paths": flat["n_paths"]},
            "query": {"t0": flat["t0"], "profile": flat["profile"]},
            "basis": {"kind": flat["basis_kind"]},
            "stencil": {},
            "params": flat["params"],
            self.mode: flat["options"],
        }
        if flat["x0"] is not None:
            doc["query"]["x0"] = flat["x0"]
        for key, section, name in (
                ("degree", "basis", "degree"), ("ridge_lambda", "basis", "ridge_lambda"),
                ("eps", "stencil", "eps"), ("eps2", "stencil", "eps2")):
            if flat[key] is not None:
                doc[section][name] = flat[key]
        return doc


def load(path: str) -> ExperimentConfig:
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigInvalid(str(path), f"not valid TOML: {e}") from e
    except OSError as e:
        raise ConfigInvalid(str(path), f"cannot read: {e}") from e
    return ExperimentConfig.from_dict(raw)


# -- per-mode option checks ------------------------------------------------------------------

def _check_levels(cfg: ExperimentConfig, name: str, levels: t.Any):
    if not isinstance(levels, list) or not levels:
        raise ConfigInvalid(name, "expected a non-empty list of step counts")
    levels = [_integer(name, n, minimum=2) for n in levels]
    if levels != sorted(set(levels)):
        raise ConfigInvalid(name, "step counts must be strictly increasing")
    for n in levels:
        grid = cfg.grid(n)
        _grid_time("query.t0", grid, cfg.t0)
        try:
            cfg.entry().coefficients(grid, cfg.params)
        except NonGridTime as e:
            raise ConfigInvalid(name, f"N={n} does not fit the benchmark parameters: {e}") from e


def _check_n_list(cfg: ExperimentConfig, name: str, n_list: t.Any):
    if not isinstance(n_list, list) or not n_list:
        raise ConfigInvalid(name, "expected a non-empty list of mollifier indices")
    n_list = [_integer(name, n) for n in n_list]
    if n_list != sorted(set(n_list)):
        raise ConfigInvalid(name, "mollifier indices must be strictly increasing")
    if 1.0 / n_list[0] >= cfg.horizon_T / 2:
        raise ConfigInvalid(name, f"1/n = {1.0 / n_list[0]} must be below T/2")


def _check_t1(cfg: ExperimentConfig, name: str, t1: t.Any):
    t1 = _number(name, t1, allow_zero=True)
    _grid_time(name, cfg.grid(), t1)
    if not cfg.t0 <= t1 <= cfg.horizon_T:
        raise ConfigInvalid(name, f"t1 must lie in [t0, T] = [{cfg.t0}, {cfg.horizon_T}]")


def _check_times(cfg: ExperimentConfig, name: str, times: t.Any):
    if not isinstance(times, list):
        raise ConfigInvalid(name, "expected a list of grid times")
    for time in times:
        _grid_time(name, cfg.grid(), _number(name, time))
        if not cfg.t0 < time < cfg.horizon_T:
            raise ConfigInvalid(name, f"interior time {time} must lie in (t0, T)")


def _check_fresh_seed(cfg: ExperimentConfig, name: str, seed: t.Any):
    if _integer(name, seed, minimum=0) == cfg.seed:
        raise ConfigInvalid(name, "closed-loop evaluation needs a seed different from mc.seed")


def _positive(cfg: ExperimentConfig, name: str, val: t.Any):
    _number(name, val)


def _count(minimum: int):
    return lambda cfg, name, val: _integer(name, val, minimum=minimum)


def _among(choices: t.Sequence[str]):
    return lambda cfg, name, val: _choice(name, val, choices)


MODE_OPTIONS: t.Dict[str, t.Dict[str, t.Callable[[ExperimentConfig, str, t.Any], t.Any]]] = {
    FORWARD: {"export_paths": _count(0)},
    VALUE: {},
    RESIDUAL: {"levels": _check_levels},
    DERIVATIVE: {"direction": _among(DIRECTIONS), "interior_times": _check_times},
    MOLLIFY: {"n_list": _check_n_list},
    CONTROL: {"M": _positive, "fresh_seed": _check_fresh_seed, "n_random_controls": _count(0)},
    FLOW: {"t1": _check_t1, "mode": _among(FLOW_MODES), "n_outer": _count(2), "n_inner": _count(2)},
}
