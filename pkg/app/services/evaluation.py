# evaluation.py
# Imputation metrics, baselines and Rubin pooling
# -----------------------------------------------------

from __future__ import annotations

import time
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple, TypeVar

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, ConfigDict, model_validator
from scipy import linalg

from app.models.schemas import MetricsReport, PooledEstimate, VariableMetrics
from app.models.table import DataTable
from app.services.copula_sampler import ChainResult, ImputationSummary
from app.services.simulation import TruthRecord
from app.services.stat_kernels import equal_tailed_interval
from app.utils.errors import ConfigError, DataError

T = TypeVar("T")
ErrorMode = Literal["all", "mean"]


# -------------------- Imputed cells --------------------
class ImputedCells(BaseModel):
    """Imputations for a set of cells: all draws (frames × cells) and/or a point per cell."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    rows: np.ndarray
    cols: np.ndarray
    columns: List[str]
    draws: Optional[np.ndarray] = None
    point: Optional[np.ndarray] = None

    @model_validator(mode="after")
    def _shapes(self) -> "ImputedCells":
        n = self.rows.size
        if self.cols.size != n:
            raise DataError("ImputedCells rows and cols differ in length")
        if self.draws is not None and (self.draws.ndim != 2 or self.draws.shape[1] != n):
            raise DataError("ImputedCells draws must be frames × cells")
        if self.point is not None and self.point.shape != (n,):
            raise DataError("ImputedCells point must hold one value per cell")
        if self.draws is None and self.point is None:
            raise DataError("ImputedCells needs draws or point values")
        return self

    @classmethod
    def from_values(cls, rows, cols, values, columns: Sequence[str]) -> "ImputedCells":
        values = np.asarray(values, dtype=np.float64)
        return cls(
            rows=np.asarray(rows, dtype=np.int64),
            cols=np.asarray(cols, dtype=np.int64),
            columns=list(columns),
            draws=values[np.newaxis, :],
            point=values,
        )

    @classmethod
    def from_chain(cls, chain: ChainResult, summary: Optional[ImputationSummary] = None) -> "ImputedCells":
        return cls(
            rows=chain.rows,
            cols=chain.cols,
            columns=chain.columns,
            draws=chain.draws,
            point=None if summary is None else summary.point,
        )

    def align(self, truth: TruthRecord) -> np.ndarray:
        """Index of each truth cell inside these cells; DataError if any is absent."""
        positions = {name: j for j, name in enumerate(self.columns)}
        try:
            truth_cols = np.array([positions[truth.columns[c]] for c in truth.cols], dtype=np.int64)
        except KeyError as e:
            raise DataError(f"Truth column {e} has no imputations") from None
        if truth.n_cells == 0:
            return np.zeros(0, dtype=np.int64)
        width = len(self.columns)
        keys = self.rows * width + self.cols
        wanted = truth.rows * width + truth_cols
        order = np.argsort(keys, kind="stable")
        found = np.searchsorted(keys[order], wanted)
        found = np.minimum(found, max(keys.size - 1, 0))
        if keys.size == 0 or not np.array_equal(keys[order][found], wanted):
            raise DataError("Truth coordinates do not match the imputed cells")
        return order[found]

    def values_for(self, truth: TruthRecord, mode: ErrorMode) -> np.ndarray:
        """frames × truth cells ('all') or 1 × truth cells ('mean')."""
        idx = self.align(truth)
        if mode == "all":
            if self.draws is None:
                raise DataError("No imputation draws available")
            return self.draws[:, idx]
        if self.point is None:
            raise DataError("No point imputations available")
        return self.point[idx][np.newaxis, :]


# -------------------- Error metrics --------------------
def _per_variable(truth: TruthRecord, values: np.ndarray, statistic, draw_averaged: bool) -> Dict[str, float]:
    errors = values - truth.values[np.newaxis, :]
    out: Dict[str, float] = {}
    for c in np.unique(truth.cols):
        cell_errors = errors[:, truth.cols == c]
        if draw_averaged:
            out[truth.columns[c]] = float(np.mean(statistic(cell_errors, axis=0)))
        else:
            out[truth.columns[c]] = float(statistic(cell_errors, axis=None))
    return out


def _mean_abs(errors: np.ndarray, axis) -> np.ndarray:
    return np.mean(np.abs(errors), axis=axis)


def _root_mean_sq(errors: np.ndarray, axis) -> np.ndarray:
    return np.sqrt(np.mean(np.square(errors), axis=axis))


def _overall(per_variable: Dict[str, float]) -> float:
    if not per_variable:
        raise DataError("No truth cells to evaluate")
    return float(np.mean(list(per_variable.values())))


def mae(
    truth: TruthRecord, imputed: ImputedCells, mode: ErrorMode = "all", draw_averaged: bool = False
) -> Tuple[Dict[str, float], float]:
    """Per-variable MAE and their unweighted mean.

    mode 'all' averages |truth − draw| over every saved draw, 'mean' uses the
    point imputation. `draw_averaged` averages each cell's error over draws
    first, then across cells.
    """
    per_variable = _per_variable(truth, imputed.values_for(truth, mode), _mean_abs, draw_averaged)
    return per_variable, _overall(per_variable)


def rmse(
    truth: TruthRecord, imputed: ImputedCells, mode: ErrorMode = "all", draw_averaged: bool = False
) -> Tuple[Dict[str, float], float]:
    """Per-variable RMSE and their unweighted mean; modes as in `mae`."""
    per_variable = _per_variable(truth, imputed.values_for(truth, mode), _root_mean_sq, draw_averaged)
    return per_variable, _overall(per_variable)


def _discrete_subset(truth: TruthRecord, kinds, columns: Optional[Sequence[str]]) -> np.ndarray:
    """Mask of truth cells in the selected discrete columns; `kinds` follows truth.columns."""
    kind_of = dict(zip(truth.columns, kinds))
    if columns is None:
        columns = [name for name in truth.columns if kind_of[name].is_discrete]
    for name in columns:
        if name not in kind_of:
            raise ConfigError(f"Unknown column '{name}'")
        if not kind_of[name].is_discrete:
            raise ConfigError(f"Percent correct is undefined for continuous column '{name}'")
    wanted = [truth.columns.index(name) for name in columns]
    return np.isin(truth.cols, wanted)


def percent_correct(
    truth: TruthRecord, imputed: ImputedCells, kinds, columns: Optional[Sequence[str]] = None
) -> float:
    """Share of binary/ordinal truth cells whose point imputation equals the truth."""
    subset = _discrete_subset(truth, kinds, columns)
    if not subset.any():
        raise DataError("No binary/ordinal MISSING cells to score")
    point = imputed.values_for(truth, "mean")[0]
    return float(np.mean(point[subset] == truth.values[subset]))


def _coverage_hits(truth: TruthRecord, imputed: ImputedCells, level: float, kinds=None) -> np.ndarray:
    draws = imputed.values_for(truth, "all")
    if draws.shape[0] < 2:
        raise ConfigError("Coverage needs at least 2 draws per cell")
    lower, upper = equal_tailed_interval(draws, level)
    if kinds is not None:
        discrete = _discrete_subset(truth, kinds, None)
        if discrete.any():
            lower[discrete], upper[discrete] = equal_tailed_interval(draws[:, discrete], level, discrete=True)
    return (truth.values >= lower) & (truth.values <= upper)


def ci_coverage(truth: TruthRecord, imputed: ImputedCells, level: float = 0.95, kinds=None) -> float:
    """Share of truth cells inside the equal-tailed `level` interval of their draws.

    `kinds` follows truth.columns; discrete columns then take the same
    inverted_cdf bounds as the imputation summary.
    """
    hits = _coverage_hits(truth, imputed, level, kinds)
    if hits.size == 0:
        raise DataError("No truth cells to evaluate")
    return float(hits.mean())


# -------------------- Baselines --------------------
def _column_mode(column: np.ndarray) -> float:
    support, counts = np.unique(column, return_counts=True)
    return float(support[np.argmax(counts)])


def baseline_imputation(masked: DataTable, truth: TruthRecord) -> ImputedCells:
    """Column-mean imputation for continuous cells, marginal mode for discrete cells."""
    fill = np.empty(masked.n_cols)
    for j, kind in enumerate(masked.kinds):
        observed = masked.values[~np.isnan(masked.values[:, j]), j]
        fill[j] = _column_mode(observed) if kind.is_discrete else float(observed.mean())
    positions = [masked.index_of(name) for name in truth.columns]
    cols = np.array([positions[c] for c in truth.cols], dtype=np.int64)
    return ImputedCells.from_values(truth.rows, cols, fill[cols], masked.columns)


# -------------------- Reports --------------------
def build_report(
    dataset: str,
    truth: TruthRecord,
    masked: DataTable,
    imputed: ImputedCells,
    level: float = 0.95,
    seconds: Optional[float] = None,
    n_units: Optional[int] = None,
    n_periods: Optional[int] = None,
    rho: Optional[float] = None,
    draw_averaged: bool = False,
) -> MetricsReport:
    """MetricsReport of one imputation against its recorded truth."""
    baseline = baseline_imputation(masked, truth)
    kinds = [masked.kinds[masked.index_of(name)] for name in truth.columns]
    has_draws = imputed.draws is not None and imputed.draws.shape[0] >= 2
    has_point = imputed.point is not None
    hits = _coverage_hits(truth, imputed, level, kinds) if has_draws else None

    variables: List[VariableMetrics] = []
    for c in np.unique(truth.cols):
        name = truth.columns[int(c)]
        kind = masked.kinds[masked.index_of(name)]
        sub = truth.cols == c
        record = TruthRecord(
            rows=truth.rows[sub], cols=truth.cols[sub], values=truth.values[sub], columns=truth.columns
        )
        entry = {"name": name, "kind": kind.label(), "n_cells": int(sub.sum())}
        if hits is not None:
            entry["coverage"] = float(hits[sub].mean())
        if kind.is_discrete:
            if has_point:
                entry["percent_correct"] = percent_correct(record, imputed, kinds)
            entry["baseline_percent_correct"] = percent_correct(record, baseline, kinds)
        else:
            if imputed.draws is not None:
                entry["mae_all"] = mae(record, imputed, "all", draw_averaged)[1]
                entry["rmse_all"] = rmse(record, imputed, "all", draw_averaged)[1]
            if has_point:
                entry["mae_mean"] = mae(record, imputed, "mean")[1]
                entry["rmse_mean"] = rmse(record, imputed, "mean")[1]
            entry["baseline_rmse"] = rmse(record, baseline, "mean")[1]
        variables.append(VariableMetrics(**entry))

    def mean_of(field: str) -> Optional[float]:
        values = [getattr(v, field) for v in variables if getattr(v, field) is not None]
        return float(np.mean(values)) if values else None

    discrete = _discrete_subset(truth, kinds, None)
    overall_correct = None
    if has_point and discrete.any():
        point = imputed.values_for(truth, "mean")[0]
        overall_correct = float(np.mean(point[discrete] == truth.values[discrete]))

    report = MetricsReport(
        dataset=dataset,
        level=level,
        seconds=seconds,
        n_units=n_units,
        n_periods=n_periods,
        rho=rho,
        variables=variables,
        mae_all=mean_of("mae_all"),
        rmse_all=mean_of("rmse_all"),
        mae_mean=mean_of("mae_mean"),
        rmse_mean=mean_of("rmse_mean"),
        coverage=None if hits is None or hits.size == 0 else float(hits.mean()),
        percent_correct=overall_correct,
    )
    logger.debug(f"Report {dataset}: rmse_mean={report.rmse_mean} coverage={report.coverage}")
    return report


def compare_external(truth: TruthRecord, path: str | Path, masked: DataTable, dataset: str = "external") -> MetricsReport:
    """Score another method's imputations, read from a (row, column, value) CSV."""
    try:
        frame = pd.read_csv(path)
    except FileNotFoundError:
        raise DataError(f"External imputation file not found: {path}") from None
    missing = {"row", "column", "value"} - set(frame.columns)
    if missing:
        raise DataError(f"External imputation file lacks columns {sorted(missing)}")
    positions = {name: j for j, name in enumerate(masked.columns)}
    unknown = set(frame["column"]) - set(positions)
    if unknown:
        raise DataError(f"External imputations name unknown columns {sorted(unknown)}")
    imputed = ImputedCells.from_values(
        frame["row"].to_numpy(dtype=np.int64),
        [positions[c] for c in frame["column"]],
        frame["value"].to_numpy(dtype=np.float64),
        masked.columns,
    )
    return build_report(dataset, truth, masked, imputed)


# -------------------- Rubin's rules --------------------
def rubin_pool(estimates, variances, names: Optional[Sequence[str]] = None) -> PooledEstimate:
    """Pool m per-imputation estimates (m × k or m) and their sampling variances."""
    q = np.atleast_1d(np.asarray(estimates, dtype=np.float64))
    u = np.atleast_1d(np.asarray(variances, dtype=np.float64))
    if q.shape != u.shape:
        raise ConfigError(f"Estimates {q.shape} and variances {u.shape} differ in shape")
    if q.ndim == 1:
        q, u = q[:, np.newaxis], u[:, np.newaxis]
    m = q.shape[0]
    if m < 2:
        raise ConfigError(f"Rubin pooling needs m >= 2 imputations, got {m}")
    if (u < 0).any():
        raise ConfigError("Within-imputation variances must be non-negative")

    estimate = q.mean(axis=0)
    within = u.mean(axis=0)
    between = q.var(axis=0, ddof=1)
    inflated = (1.0 + 1.0 / m) * between
    total = within + inflated
    with np.errstate(divide="ignore", invalid="ignore"):
        relative = np.where(within > 0, inflated / within, np.inf)
        fraction = np.where(total > 0, inflated / total, 0.0)
        df = np.where(relative > 0, (m - 1) * (1.0 + 1.0 / relative) ** 2, np.inf)
    return PooledEstimate(
        m=m,
        estimate=estimate.tolist(),
        within=within.tolist(),
        between=between.tolist(),
        total=total.tolist(),
        relative_increase=relative.tolist(),
        fraction_missing=fraction.tolist(),
        df=df.tolist(),
        names=None if names is None else list(names),
    )


def _ols(frame: DataTable, outcome: str, predictors: Sequence[str], intercept: bool) -> Tuple[np.ndarray, np.ndarray]:
    y = frame.values[:, frame.index_of(outcome)]
    x = frame.values[:, [frame.index_of(name) for name in predictors]]
    if intercept:
        x = np.column_stack([np.ones(frame.n_rows), x])
    if np.isnan(y).any() or np.isnan(x).any():
        raise DataError("Regression frames must be completed (no MISSING cells)")
    n, k = x.shape
    if n <= k:
        raise DataError(f"OLS needs more rows ({n}) than coefficients ({k})")
    try:
        factor = linalg.cho_factor(x.T @ x)
    except linalg.LinAlgError:
        raise DataError("Design matrix is rank deficient") from None
    beta = linalg.cho_solve(factor, x.T @ y)
    residual = y - x @ beta
    sigma2 = float(residual @ residual) / (n - k)
    return beta, sigma2 * np.diag(linalg.cho_solve(factor, np.eye(k)))


def pool_regression(
    frames: Sequence[DataTable], outcome: str, predictors: Sequence[str], intercept: bool = True
) -> PooledEstimate:
    """OLS on every completed frame, pooled with Rubin's rules."""
    fits = [_ols(frame, outcome, predictors, intercept) for frame in frames]
    names = (["(Intercept)"] if intercept else []) + list(predictors)
    return rubin_pool([b for b, _ in fits], [v for _, v in fits], names=names)


# -------------------- Timing --------------------
def time_chain(runner: Callable[[], T]) -> Tuple[T, float]:
    """Run `runner` and return (its result, monotonic wall-clock seconds)."""
    start = time.perf_counter()
    result = runner()
    return result, time.perf_counter() - start
