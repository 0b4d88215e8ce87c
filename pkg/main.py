import argparse
import sys

import pandas as pd

from common.colors import bcolors, get_logger
from common.errors import PathflowError

logger = get_logger("main")


def main_run(config: str, seed=None, out=None) -> int:
    """Run one experiment file and write its report."""
    from bench import load, run
    experiment = load(config)
    report = run(experiment, seed=seed, output_dir=out)
    for row in report.checks:
        color = bcolors.OKGREEN if row["ok"] else bcolors.FAIL
        print(f"{color}{row['name']}{bcolors.ENDC}: {row['value']:.6g} (threshold {row['threshold']:.6g})")
    print(f"Report written to {report.output_dir}")
    return 0 if report.passed else 2


def main_bench_list() -> int:
    """Print the benchmark registry."""
    from bench import list_benchmarks
    with pd.option_context("display.max_colwidth", 60, "display.width", 200):
        print(list_benchmarks().to_string(index=False))
    return 0


def main_accept(suite: str = "fast", out=None, only=None) -> int:
    """Run the acceptance criteria and print the scorecard."""
    from bench import accept
    scorecard = accept(suite, output_dir=out, only=only)
    with pd.option_context("display.width", 200):
        print(scorecard[["criterion", "check", "value", "threshold", "ok"]].to_string(index=False))
    failed = scorecard[~scorecard["ok"]]
    if len(failed) > 0:
        print(f"{bcolors.FAIL}{len(failed)} of {len(scorecard)} checks failed{bcolors.ENDC}")
        return 2
    print(f"{bcolors.OKGREEN}All {len(scorecard)} checks passed{bcolors.ENDC}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pathflow")
    subparsers = parser.add_subparsers(dest="command", required=True)

    run_parser = subparsers.add_parser("run")
    run_parser.add_argument("--config", type=str, required=True)
    run_parser.add_argument("--seed", type=int, default=None)
    run_parser.add_argument("--out", type=str, default=None)
    run_parser.set_defaults(func=main_run)

    bench_parser = subparsers.add_parser("bench")
    bench_subparsers = bench_parser.add_subparsers(dest="bench_command", required=True)
    list_parser = bench_subparsers.add_parser("list")
    list_parser.set_defaults(func=main_bench_list)

    accept_parser = subparsers.add_parser("accept")
    accept_parser.add_argument("--suite", type=str, choices=["fast", "full"], default="fast")
    accept_parser.add_argument("--out", type=str, default=None)
    accept_parser.add_argument("--only", type=int, nargs="+", default=None)
    accept_parser.set_defaults(func=main_accept)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    func = args.func
    del args.func
    del args.command
    if hasattr(args, "bench_command"):
        del args.bench_command
    try:
        return func(**vars(args))
    except PathflowError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 1
    except Exception as e:
        logger.exception(f"Unexpected failure: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
