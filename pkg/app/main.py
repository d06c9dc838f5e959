"""Command-line entry point: ``python -m app.main <subcommand> ...``.

Exit codes: 0 ok, 1 benchmark finished with failed cells, 2 configuration
error, 3 data error, 4 numerical failure.
"""

import argparse
import sys
from typing import List, Optional

from loguru import logger

from app.config import log_config, settings
from app.services import runner
from app.utils.errors import CopulaImputeError
from app.utils.logging import setup_logging


def _chain_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, help="Root seed (default from settings)")
    p.add_argument("--iters", type=int, help="Total Gibbs iterations")
    p.add_argument("--thin", type=int, help="Save every thin-th iteration")
    p.add_argument("--burnin", type=int, help="Saved frames discarded at the start")
    p.add_argument("--level", type=float, help="Credible level for intervals and coverage")


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration; flags override it")
    p.add_argument("--out", help="Output directory (default <output_root>/<subcommand>)")
    p.add_argument("--jobs", type=int, help="Worker processes for replicates/grid cells")
    p.add_argument("--quiet", action="store_true", help="Only warnings and errors on stderr")


def _lag_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lags", type=int, help="Append lags 1..k of every data column")
    p.add_argument("--exclude", nargs="+", help="Columns that get no lag columns")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="copula-impute", description=f"{settings.app_name} {settings.version}")
    sub = ap.add_subparsers(dest="cmd", required=True)

    imp = sub.add_parser("impute", help="Multiply impute a CSV with the Gaussian copula sampler")
    imp.add_argument("--input", required=True, help="CSV with a header row")
    imp.add_argument("--schema", required=True, help="JSON mapping column -> kind")
    imp.add_argument("--format", choices=["long", "frames"], help="Draw export: long CSV or one CSV per frame")
    imp.add_argument("--round-discrete", action="store_true", help="Discrete point = rounded mean instead of mode")
    _chain_flags(imp)
    _lag_flags(imp)
    _common_flags(imp)

    sim = sub.add_parser("simulate", help="Generate panel datasets with injected missingness")
    sim.add_argument("--replicates", type=int, help="Number of datasets")
    sim.add_argument("--periods", type=int, nargs="+", help="Time points T")
    sim.add_argument("--rhos", type=float, nargs="+", help="AR(1) factor")
    sim.add_argument("--seed", type=int, help="Root seed")
    _common_flags(sim)

    ev = sub.add_parser("evaluate", help="Score an impute run against recorded truth")
    ev.add_argument("--truth", required=True, help="truth.csv from simulate")
    ev.add_argument("--run", required=True, help="Output directory of an impute run")
    ev.add_argument("--input", required=True, help="The masked CSV that was imputed")
    ev.add_argument("--schema", help="Schema JSON (default <run>/schema.json)")
    ev.add_argument("--external", help="Another method's imputations as row,column,value CSV")
    ev.add_argument("--level", type=float, help="Coverage level")
    _common_flags(ev)

    bench = sub.add_parser("benchmark", help="simulate → impute → evaluate over a (T, rho) grid")
    bench.add_argument("--replicates", type=int, help="Replicates per grid cell")
    bench.add_argument("--periods", type=int, nargs="+", help="Grid of time points T")
    bench.add_argument("--rhos", type=float, nargs="+", help="Grid of AR(1) factors")
    _chain_flags(bench)
    _lag_flags(bench)
    _common_flags(bench)

    reg = sub.add_parser("regress", help="Bayesian linear regression with imputation inside the chain")
    reg.add_argument("--input", required=True, help="CSV with a header row")
    reg.add_argument("--schema", required=True, help="JSON mapping column -> kind")
    reg.add_argument("--outcome", help="Outcome column")
    reg.add_argument("--predictors", nargs="+", help="Predictor columns")
    _chain_flags(reg)
    _lag_flags(reg)
    _common_flags(reg)
    return ap


COMMANDS = {
    "impute": runner.cmd_impute,
    "simulate": runner.cmd_simulate,
    "evaluate": runner.cmd_evaluate,
    "benchmark": runner.cmd_benchmark,
    "regress": runner.cmd_regress,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(settings.log_level, settings.log_file, quiet=args.quiet)
    log_config(settings)
    try:
        return COMMANDS[args.cmd](args)
    except CopulaImputeError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        if settings.log_level.upper() == "DEBUG":
            logger.exception(e)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
