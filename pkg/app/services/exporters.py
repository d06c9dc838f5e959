# exporters.py
# Writers and readers for every run artifact
# -----------------------------------------------------
# CSV through pandas (shortest round-trip floats, "NA" for MISSING, "\n"
# line endings) and JSON through pydantic's model_dump(mode="json").

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Dict, List, Sequence

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel

from app.models.table import DataTable
from app.services.copula_sampler import ChainResult, ImputationSummary
from app.services.data_model import read_csv, read_schema, schema_of, write_csv
from app.services.embedded_bayes import PosteriorDraws, summary_frame
from app.services.evaluation import ImputedCells
from app.services.simulation import TruthRecord
from app.utils.errors import DataError

DRAWS_DIR = "draws"
FRAMES_DIR = "frames"
DRAWS_LONG = "draws_long.csv"
CORR_DRAWS = "corr_draws.csv"
SUMMARY = "summary.csv"
SCHEMA = "schema.json"
METRICS_JSON = "metrics.json"
METRICS_TIDY = "metrics_tidy.csv"
BENCHMARK = "benchmark.csv"
POSTERIOR_DRAWS = "posterior_draws.csv"
POSTERIOR_SUMMARY = "posterior_summary.csv"
MANIFEST = "manifest.json"


def write_frame(frame: pd.DataFrame, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, na_rep="NA", lineterminator="\n")
    return path


def write_json(payload: Any, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(payload, BaseModel):
        payload = payload.model_dump(mode="json")
    elif isinstance(payload, list):
        payload = [p.model_dump(mode="json") if isinstance(p, BaseModel) else p for p in payload]
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, ensure_ascii=False, indent=2)
        f.write("\n")
    return path


# -------------------- Imputation outputs --------------------
def write_schema(table: DataTable, out_dir: Path) -> Path:
    return write_json(schema_of(table), out_dir / SCHEMA)


def write_draws_long(chain: ChainResult, out_dir: Path) -> Path:
    """One row per (frame, MISSING cell): frame, row, column, value."""
    n_cells = chain.rows.size
    names = np.array(chain.columns, dtype=object)
    frame = pd.DataFrame(
        {
            "frame": np.repeat(np.arange(1, chain.n_frames + 1), n_cells),
            "row": np.tile(chain.rows, chain.n_frames),
            "column": np.tile(names[chain.cols], chain.n_frames),
            "value": chain.draws.ravel(),
        }
    )
    return write_frame(frame, out_dir / DRAWS_DIR / DRAWS_LONG)


def write_frames(chain: ChainResult, out_dir: Path) -> List[Path]:
    """Every completed frame as frames/frame_0001.csv, ..."""
    width = max(4, len(str(chain.n_frames)))
    return [
        write_csv(chain.frame(k), out_dir / FRAMES_DIR / f"frame_{k + 1:0{width}d}.csv")
        for k in range(chain.n_frames)
    ]


def write_corr_draws(chain: ChainResult, out_dir: Path) -> Path:
    """Upper triangle of each saved C: frame, var1, var2, value."""
    upper_i, upper_j = np.triu_indices(len(chain.columns), k=1)
    names = np.array(chain.columns, dtype=object)
    frame = pd.DataFrame(
        {
            "frame": np.repeat(np.arange(1, chain.n_frames + 1), upper_i.size),
            "var1": np.tile(names[upper_i], chain.n_frames),
            "var2": np.tile(names[upper_j], chain.n_frames),
            "value": chain.corr_draws[:, upper_i, upper_j].ravel(),
        }
    )
    return write_frame(frame, out_dir / DRAWS_DIR / CORR_DRAWS)


def write_summary(summary: ImputationSummary, out_dir: Path) -> Path:
    return write_frame(summary.to_frame(), out_dir / SUMMARY)


# -------------------- Simulation outputs --------------------
def write_truth(truth: TruthRecord, path: str | Path) -> Path:
    return write_frame(truth.to_frame(), path)


def read_truth(path: str | Path, columns: Sequence[str]) -> TruthRecord:
    try:
        frame = pd.read_csv(path, keep_default_na=False)
    except FileNotFoundError:
        raise DataError(f"Truth file not found: {path}") from None
    return TruthRecord.from_frame(frame, columns)


# -------------------- Reading imputations back --------------------
def read_imputed(out_dir: str | Path, truth: TruthRecord) -> ImputedCells:
    """Draws and summary points of an impute run, restricted to the truth cells.

    Reads draws/draws_long.csv when present, otherwise frames/*.csv.
    """
    out_dir = Path(out_dir)
    columns = list(truth.columns)
    positions = {name: j for j, name in enumerate(columns)}
    long_path = out_dir / DRAWS_DIR / DRAWS_LONG
    if long_path.exists():
        frame = pd.read_csv(long_path, keep_default_na=False)
        unknown = set(frame["column"]) - set(positions)
        if unknown:
            raise DataError(f"Draws name columns absent from the truth table: {sorted(unknown)}")
        n_frames = int(frame["frame"].max())
        first = frame[frame["frame"] == 1]
        if len(frame) != n_frames * len(first):
            raise DataError(f"{long_path}: frames hold different cell counts")
        rows = first["row"].to_numpy(dtype=np.int64)
        cols = np.array([positions[c] for c in first["column"]], dtype=np.int64)
        draws = frame["value"].to_numpy(dtype=np.float64).reshape(n_frames, len(first))
    else:
        paths = sorted((out_dir / FRAMES_DIR).glob("frame_*.csv"))
        if not paths:
            raise DataError(f"No imputation draws found under {out_dir}")
        schema = read_schema(out_dir / SCHEMA)
        rows, cols = truth.rows, truth.cols
        draws = np.empty((len(paths), truth.n_cells))
        for k, path in enumerate(paths):
            table = read_csv(path, schema)
            if list(table.columns) != columns:
                raise DataError(f"{path}: columns differ from the truth table")
            draws[k] = table.values[rows, cols]

    point = None
    summary_path = out_dir / SUMMARY
    if summary_path.exists():
        summary = pd.read_csv(summary_path, keep_default_na=False)
        lookup: Dict[tuple, float] = {
            (int(r), positions.get(c, -1)): float(v)
            for r, c, v in zip(summary["row"], summary["column"], summary["point"])
        }
        try:
            point = np.array([lookup[(int(r), int(c))] for r, c in zip(rows, cols)])
        except KeyError:
            raise DataError(f"{summary_path} does not cover every imputed cell") from None
    logger.debug(f"Read {draws.shape[0]} draws of {draws.shape[1]} cells from {out_dir}")
    return ImputedCells(rows=rows, cols=cols, columns=columns, draws=draws, point=point)


# -------------------- Regression outputs --------------------
def write_posterior(draws: PosteriorDraws, summary_rows, out_dir: Path) -> List[Path]:
    return [
        write_frame(draws.to_long_frame(), out_dir / POSTERIOR_DRAWS),
        write_frame(summary_frame(summary_rows), out_dir / POSTERIOR_SUMMARY),
    ]
