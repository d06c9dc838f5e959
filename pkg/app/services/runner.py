# runner.py
# Subcommand bodies: impute / simulate / evaluate / benchmark / regress
# -----------------------------------------------------
# Each cmd_* takes the parsed argparse namespace, resolves a RunConfig
# (flags > --config JSON > Settings defaults), calls the library and writes
# artifacts plus one manifest. Output paths go to stdout, everything else
# to the loguru stderr sink.

from __future__ import annotations

import argparse
import json
import time
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import pandas as pd
from loguru import logger
from pydantic import ValidationError

from app import __version__
from app.config import settings
from app.models.schemas import MetricsReport, RegressionSpec, RunConfig, RunManifest, SimulationConfig
from app.models.table import ColumnKind, DataTable
from app.services import exporters
from app.services.copula_sampler import ChainResult, run_chain, summarize
from app.services.data_model import add_lags, read_csv, read_schema, source_columns, write_csv
from app.services.embedded_bayes import gibbs_regress, summarize_posterior
from app.services.evaluation import ImputedCells, build_report, compare_external, time_chain
from app.services.simulation import TIME_COLUMN, UNIT_COLUMN, missingness_report, simulate_one
from app.services.stat_kernels import seed_ints
from app.utils.errors import ConfigError, CopulaImputeError
from app.utils.logging import progress_logger

BANNER = "=" * 70


# -------------------- Configuration --------------------
def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _settings_defaults() -> Dict[str, Any]:
    return {
        "chain": {
            "total_iterations": settings.default_iterations,
            "thin": settings.default_thin,
            "burn_in": settings.default_burn_in,
            "seed": settings.default_seed,
        },
        "simulation": {"seed": settings.default_seed},
        "level": settings.default_level,
        "jobs": settings.default_jobs,
    }


def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"Config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError("Config file must hold a JSON object")
    return raw


def _flag_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Only flags the user actually passed (argparse defaults are None)."""
    def get(name: str):
        return getattr(args, name, None)

    chain = {k: get(f) for k, f in (("total_iterations", "iters"), ("thin", "thin"), ("burn_in", "burnin"), ("seed", "seed"))}
    overrides: Dict[str, Any] = {"chain": {k: v for k, v in chain.items() if v is not None}}
    if get("seed") is not None:
        overrides["simulation"] = {"seed": get("seed")}
    for key, flag in (("lags", "lags"), ("exclude", "exclude"), ("level", "level"), ("jobs", "jobs"), ("export_format", "format")):
        if get(flag) is not None:
            overrides[key] = get(flag)
    if get("round_discrete"):
        overrides["round_discrete"] = True
    grid: Dict[str, Any] = {}
    for key, flag in (("periods", "periods"), ("rhos", "rhos"), ("replicates", "replicates")):
        if get(flag) is not None:
            grid[key] = get(flag)
    if grid:
        overrides["grid"] = grid
    if get("outcome") is not None or get("predictors") is not None:
        overrides["regression"] = {
            k: v for k, v in (("outcome", get("outcome")), ("predictors", get("predictors"))) if v is not None
        }
    return overrides


def resolve_run_config(args: argparse.Namespace) -> RunConfig:
    """Flags override the --config file, which overrides Settings defaults."""
    layered = _deep_merge(_settings_defaults(), load_config_file(getattr(args, "config", None)))
    layered = _deep_merge(layered, _flag_overrides(args))
    try:
        return RunConfig.model_validate(layered)
    except ValidationError as e:
        raise ConfigError(f"Invalid run configuration: {e}") from None


def _out_dir(args: argparse.Namespace, subcommand: str) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else Path(settings.output_root) / subcommand
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(paths: Sequence[Path]) -> None:
    for path in paths:
        print(path)


def _write_manifest(
    out_dir: Path,
    subcommand: str,
    config: RunConfig,
    seed: int,
    started_at: datetime,
    inputs: Dict[str, str],
    outputs: Sequence[Path],
    copula_columns: Optional[int] = None,
    exit_code: int = 0,
) -> Path:
    manifest = RunManifest(
        subcommand=subcommand,
        config=config.model_dump(mode="json"),
        seed=seed,
        version=__version__,
        started_at=started_at,
        finished_at=datetime.now(timezone.utc),
        inputs=inputs,
        outputs=sorted(str(Path(p).relative_to(out_dir)) for p in outputs),
        copula_columns=copula_columns,
        exit_code=exit_code,
    )
    return exporters.write_json(manifest, out_dir / exporters.MANIFEST)


def _load_input(args: argparse.Namespace, config: RunConfig) -> Tuple[DataTable, DataTable]:
    """(source table, table with lag columns appended when requested)."""
    if not getattr(args, "schema", None):
        raise ConfigError("--schema is required")
    table = read_csv(args.input, read_schema(args.schema))
    if config.lags:
        return table, add_lags(table, config.lags, config.exclude)
    if config.exclude:
        raise ConfigError("--exclude only applies together with --lags")
    return table, table


def _progress():
    return progress_logger(settings.progress_every) if settings.log_chain_progress else None


# -------------------- impute --------------------
def impute_table(table: DataTable, config: RunConfig, progress=None) -> ChainResult:
    """Chain on the (possibly lagged) table, viewed on its source columns."""
    chain = run_chain(table, config.chain, progress=progress)
    return chain.restrict(source_columns(table)) if table.lag_columns else chain


def cmd_impute(args: argparse.Namespace) -> int:
    started_at = datetime.now(timezone.utc)
    config = resolve_run_config(args)
    out_dir = _out_dir(args, "impute")
    logger.info(BANNER)
    logger.info(f"🚀 impute {args.input} → {out_dir}")
    logger.info(BANNER)

    source, lagged = _load_input(args, config)
    logger.info(f"Copula columns: {lagged.n_cols} ({source.n_cols} source, {lagged.n_cols - source.n_cols} lag)")
    chain = impute_table(lagged, config, progress=_progress())
    summary = summarize(chain, config.level, round_discrete=config.round_discrete)

    outputs: List[Path] = [exporters.write_schema(chain.table, out_dir)]
    if config.export_format == "long":
        outputs.append(exporters.write_draws_long(chain, out_dir))
    else:
        outputs.extend(exporters.write_frames(chain, out_dir))
    outputs.append(exporters.write_corr_draws(chain, out_dir))
    outputs.append(exporters.write_summary(summary, out_dir))
    manifest = _write_manifest(
        out_dir, "impute", config, config.chain.seed, started_at,
        {"input": str(args.input), "schema": str(args.schema)}, outputs, copula_columns=lagged.n_cols,
    )
    _emit(outputs + [manifest])
    logger.success(f"✅ {chain.n_frames} frames saved in {chain.seconds:.2f}s")
    return 0


# -------------------- simulate --------------------
def _simulate_replicate(payload: Tuple[int, int, Dict[str, Any], str]) -> List[str]:
    replicate, seed, config_json, out_dir = payload
    config = RunConfig.model_validate(config_json)
    dataset = simulate_one(config.simulation, config.missingness, seed, replicate=replicate)
    width = max(3, len(str(config.grid.replicates)))
    rep_dir = Path(out_dir) / f"replicate_{replicate + 1:0{width}d}"
    paths = [
        write_csv(dataset.complete, rep_dir / "complete.csv"),
        write_csv(dataset.masked, rep_dir / "masked.csv"),
        exporters.write_truth(dataset.truth, rep_dir / "truth.csv"),
        exporters.write_frame(missingness_report(dataset.complete, dataset.masked), rep_dir / "missingness.csv"),
    ]
    return [str(p) for p in paths]


def _pool_map(fn, payloads: List[Any], jobs: int) -> List[Any]:
    """Order-preserving map; a process pool when jobs > 1."""
    if jobs <= 1 or len(payloads) <= 1:
        return [fn(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, payloads))


def cmd_simulate(args: argparse.Namespace) -> int:
    started_at = datetime.now(timezone.utc)
    config = resolve_run_config(args)
    grid = config.grid
    if getattr(args, "periods", None) is not None or getattr(args, "rhos", None) is not None:
        if len(grid.periods) != 1 or len(grid.rhos) != 1:
            raise ConfigError("simulate takes one period count and one rho; use benchmark for grids")
        fields = {**config.simulation.model_dump(), "n_periods": grid.periods[0], "rho": grid.rhos[0]}
        try:
            config = config.model_copy(update={"simulation": SimulationConfig.model_validate(fields)})
        except ValidationError as e:
            raise ConfigError(f"Invalid simulation settings: {e}") from None
    out_dir = _out_dir(args, "simulate")
    sim = config.simulation
    logger.info(BANNER)
    logger.info(f"🚀 simulate {grid.replicates} replicate(s): {sim.n_units} units × T={sim.n_periods}, rho={sim.rho}")
    logger.info(BANNER)

    seeds = seed_ints(sim.seed, grid.replicates)
    config_json = config.model_dump(mode="json")
    payloads = [(r, seed, config_json, str(out_dir)) for r, seed in enumerate(seeds)]
    outputs = [Path(p) for paths in _pool_map(_simulate_replicate, payloads, config.jobs) for p in paths]
    schema = {UNIT_COLUMN: ColumnKind.unit().label(), TIME_COLUMN: ColumnKind.time().label()}
    for j, name in enumerate(sim.variable_names):
        schema[name] = (ColumnKind.binary() if j == sim.binary_index else ColumnKind.continuous()).label()
    schema_path = exporters.write_json(schema, out_dir / exporters.SCHEMA)
    outputs.append(schema_path)
    manifest = _write_manifest(out_dir, "simulate", config, sim.seed, started_at, {}, outputs)
    _emit(outputs + [manifest])
    logger.success(f"✅ {grid.replicates} dataset triple(s) written to {out_dir}")
    return 0


# -------------------- evaluate --------------------
def cmd_evaluate(args: argparse.Namespace) -> int:
    started_at = datetime.now(timezone.utc)
    config = resolve_run_config(args)
    run_dir = Path(args.run)
    out_dir = Path(args.out) if getattr(args, "out", None) else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    schema_path = Path(args.schema) if getattr(args, "schema", None) else run_dir / exporters.SCHEMA
    masked = read_csv(args.input, read_schema(schema_path))
    truth = exporters.read_truth(args.truth, masked.columns)
    imputed = exporters.read_imputed(run_dir, truth)

    reports = [build_report(run_dir.name or "run", truth, masked, imputed, level=config.level)]
    if getattr(args, "external", None):
        reports.append(compare_external(truth, args.external, masked, dataset=Path(args.external).stem))
    outputs = _write_reports(reports, out_dir)
    inputs = {"truth": str(args.truth), "run": str(run_dir), "input": str(args.input)}
    manifest = _write_manifest(out_dir, "evaluate", config, config.chain.seed, started_at, inputs, outputs)
    _emit(outputs + [manifest])
    return 0


def _write_reports(reports: List[MetricsReport], out_dir: Path) -> List[Path]:
    tidy = pd.concat([r.to_tidy() for r in reports], ignore_index=True)
    return [
        exporters.write_json(reports, out_dir / exporters.METRICS_JSON),
        exporters.write_frame(tidy, out_dir / exporters.METRICS_TIDY),
    ]


# -------------------- benchmark --------------------
def _benchmark_cell(payload: Tuple[int, int, float, int, int, Dict[str, Any]]) -> Dict[str, Any]:
    """simulate → impute → evaluate for one grid cell; failures become a row."""
    cell, periods, rho, replicate, seed, config_json = payload
    row: Dict[str, Any] = {"cell": cell, "n_periods": periods, "rho": rho, "replicate": replicate, "seed": seed}
    try:
        config = RunConfig.model_validate(config_json)
        simulation = config.simulation.model_copy(update={"n_periods": periods, "rho": rho})
        dataset = simulate_one(simulation, config.missingness, seed, replicate=replicate)
        masked = dataset.masked
        table = add_lags(masked, config.lags, config.exclude) if config.lags else masked
        chain_config = config.chain.model_copy(update={"seed": seed})
        chain, seconds = time_chain(lambda: run_chain(table, chain_config))
        if table.lag_columns:
            chain = chain.restrict(source_columns(table))
        summary = summarize(chain, config.level, round_discrete=config.round_discrete)
        report = build_report(
            f"T{periods}_rho{rho}_r{replicate + 1}", dataset.truth, masked,
            ImputedCells.from_chain(chain, summary), level=config.level, seconds=seconds,
            n_units=simulation.n_units, n_periods=periods, rho=rho,
        )
    except (CopulaImputeError, ValidationError) as e:
        logger.error(f"❌ benchmark cell {cell} failed: {e}")
        row.update({"status": "failed", "error": str(e)})
        return {"row": row, "report": None}
    baseline = [v.baseline_rmse for v in report.variables if v.baseline_rmse is not None]
    row.update(
        {
            "status": "ok",
            "error": "",
            "n_rows": masked.n_rows,
            "copula_columns": table.n_cols,
            "seconds": report.seconds,
            "mae_all": report.mae_all,
            "rmse_all": report.rmse_all,
            "mae_mean": report.mae_mean,
            "rmse_mean": report.rmse_mean,
            "baseline_rmse": sum(baseline) / len(baseline) if baseline else None,
            "coverage": report.coverage,
            "percent_correct": report.percent_correct,
        }
    )
    return {"row": row, "report": report.model_dump(mode="json")}


def benchmark_cells(config: RunConfig) -> List[Tuple[int, int, float, int, int, Dict[str, Any]]]:
    grid = config.grid
    seeds = seed_ints(config.chain.seed, grid.n_cells)
    config_json = config.model_dump(mode="json")
    cells = []
    for periods in grid.periods:
        for rho in grid.rhos:
            for replicate in range(grid.replicates):
                index = len(cells)
                cells.append((index, periods, rho, replicate, seeds[index], config_json))
    return cells


def cmd_benchmark(args: argparse.Namespace) -> int:
    started_at = datetime.now(timezone.utc)
    config = resolve_run_config(args)
    out_dir = _out_dir(args, "benchmark")
    cells = benchmark_cells(config)
    logger.info(BANNER)
    logger.info(f"🚀 benchmark: {len(cells)} cell(s), jobs={config.jobs}")
    logger.info(BANNER)

    t_start = time.perf_counter()
    results = _pool_map(_benchmark_cell, cells, config.jobs)
    rows = [r["row"] for r in results]
    reports = [MetricsReport.model_validate(r["report"]) for r in results if r["report"] is not None]
    failed = sum(1 for row in rows if row["status"] != "ok")

    outputs = [exporters.write_frame(pd.DataFrame(rows), out_dir / exporters.BENCHMARK)]
    if reports:
        outputs.extend(_write_reports(reports, out_dir))
    exit_code = 1 if failed else 0
    manifest = _write_manifest(out_dir, "benchmark", config, config.chain.seed, started_at, {}, outputs, exit_code=exit_code)
    _emit(outputs + [manifest])

    logger.info(BANNER)
    logger.info(f"📊 cells ok: {len(rows) - failed} | failed: {failed} | total {time.perf_counter() - t_start:.2f}s")
    logger.info(BANNER)
    return exit_code


# -------------------- regress --------------------
def cmd_regress(args: argparse.Namespace) -> int:
    started_at = datetime.now(timezone.utc)
    config = resolve_run_config(args)
    if config.regression is None:
        raise ConfigError("regress needs --outcome and --predictors (or a 'regression' config section)")
    spec: RegressionSpec = config.regression
    out_dir = _out_dir(args, "regress")
    logger.info(BANNER)
    logger.info(f"🚀 regress {spec.outcome} ~ {' + '.join(spec.predictors)}")
    logger.info(BANNER)

    _, table = _load_input(args, config)
    draws = gibbs_regress(table, spec, config.chain, progress=_progress())
    outputs = exporters.write_posterior(draws, summarize_posterior(draws, config.level), out_dir)
    manifest = _write_manifest(
        out_dir, "regress", config, config.chain.seed, started_at,
        {"input": str(args.input), "schema": str(args.schema)}, outputs, copula_columns=table.n_cols,
    )
    _emit(outputs + [manifest])
    logger.success(f"✅ {draws.n_draws} posterior draws in {draws.seconds:.2f}s")
    return 0
