from bench.registry import (
    Benchmark,
    BENCHMARKS,
    PROVENANCE_TAGS,
    get_benchmark,
    list_benchmarks,
    constant_profile,
    cosine_profile,
)
from bench.experiment import ExperimentConfig, MODES, load
from bench.runner import RunReport, run, check_determinism, build_id
from bench.acceptance import SUITES, accept
