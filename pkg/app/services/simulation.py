# simulation.py
# Synthetic panel generation and missingness injection
# -----------------------------------------------------
# Each unit draws one length p·T vector from MVN(μ_u ⊗ 1_T, Σ_var ⊗ Σ_AR1);
# missingness is then injected from donor columns and the truth is recorded.

from __future__ import annotations

from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, ConfigDict, model_validator
from scipy import linalg
from scipy.special import ndtr

from app.models.schemas import MissingnessConfig, SimulationConfig
from app.models.table import ColumnKind, DataTable
from app.services.stat_kernels import (
    Rng,
    SeedLike,
    ar1_toeplitz,
    kronecker,
    make_rng,
    random_covariance,
    seed_ints,
)
from app.utils.errors import ConfigError, DataError, NumericalError

UNIT_COLUMN = "UnitId"
TIME_COLUMN = "TimeId"


# -------------------- Generator --------------------
def generate_panel(config: SimulationConfig, rng: Rng) -> DataTable:
    """Balanced panel of config.n_units × config.n_periods rows, no MISSING cells.

    Rows are unit-major with time 1..T inside each unit. The binary column is
    Bernoulli(Φ(z-scored source column)).
    """
    p, periods = config.n_vars, config.n_periods
    sigma_var = random_covariance(p, config.eigen_range, rng)
    sigma = kronecker(sigma_var, ar1_toeplitz(periods, config.rho))
    try:
        chol = linalg.cholesky(sigma, lower=True)
    except linalg.LinAlgError:
        raise NumericalError("Overall panel covariance is not positive definite") from None

    bounds = np.asarray(config.mean_ranges, dtype=np.float64)
    means = rng.uniform(bounds[:, 0], bounds[:, 1], size=(config.n_units, p))
    noise = rng.standard_normal((config.n_units, p * periods)) @ chol.T
    panel = noise.reshape(config.n_units, p, periods) + means[:, :, np.newaxis]
    values = panel.transpose(0, 2, 1).reshape(config.n_units * periods, p)

    source = values[:, config.binary_source]
    scored = (source - source.mean()) / source.std()
    binary = config.binary_index
    values[:, binary] = (rng.random(values.shape[0]) < ndtr(scored)).astype(np.float64)

    width = len(str(config.n_units))
    units = np.repeat([f"U{u + 1:0{width}d}" for u in range(config.n_units)], periods)
    times = np.tile(np.arange(1, periods + 1), config.n_units)
    kinds = [ColumnKind.binary() if j == binary else ColumnKind.continuous() for j in range(p)]
    return DataTable(
        columns=config.variable_names,
        kinds=kinds,
        values=values,
        units=units,
        times=times,
        unit_name=UNIT_COLUMN,
        time_name=TIME_COLUMN,
    )


# -------------------- Ground truth --------------------
class TruthRecord(BaseModel):
    """True values of every injected-missing cell, column-major order."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    columns: List[str]

    @model_validator(mode="after")
    def _unique_cells(self) -> "TruthRecord":
        if not self.rows.shape == self.cols.shape == self.values.shape:
            raise DataError("TruthRecord rows, cols and values must have equal length")
        if self.rows.size and np.unique(np.stack([self.rows, self.cols]), axis=1).shape[1] != self.rows.size:
            raise DataError("TruthRecord coordinates must be unique")
        return self

    @property
    def n_cells(self) -> int:
        return int(self.rows.size)

    def restore(self, masked: DataTable) -> DataTable:
        """Put the recorded truths back; inverse of the injection."""
        if list(masked.columns) != list(self.columns):
            raise DataError("TruthRecord columns do not match the table")
        if self.n_cells and not masked.mask[self.rows, self.cols].all():
            raise DataError("TruthRecord coordinate is not MISSING in the table")
        values = np.array(masked.values)
        values[self.rows, self.cols] = self.values
        return masked.with_values(values)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"row": self.rows, "column": [self.columns[c] for c in self.cols], "value": self.values}
        )

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, columns: Sequence[str]) -> "TruthRecord":
        missing = {"row", "column", "value"} - set(frame.columns)
        if missing:
            raise DataError(f"Truth table lacks columns {sorted(missing)}")
        positions = {name: j for j, name in enumerate(columns)}
        unknown = set(frame["column"]) - set(positions)
        if unknown:
            raise DataError(f"Truth table names unknown columns {sorted(unknown)}")
        rows = frame["row"].to_numpy(dtype=np.int64)
        cols = np.array([positions[c] for c in frame["column"]], dtype=np.int64)
        order = np.lexsort((rows, cols))
        return cls(
            rows=rows[order],
            cols=cols[order],
            values=frame["value"].to_numpy(dtype=np.float64)[order],
            columns=list(columns),
        )


# -------------------- Missingness --------------------
def default_donors(columns: Sequence[str]) -> Dict[str, Tuple[str, str]]:
    """Target j takes donors (j+1, j+2) modulo the column count."""
    p = len(columns)
    return {name: (columns[(j + 1) % p], columns[(j + 2) % p]) for j, name in enumerate(columns)}


def missingness_probabilities(table: DataTable, config: MissingnessConfig) -> Dict[str, np.ndarray]:
    """P(missing) per row for every target; reads donor columns only."""
    targets = list(config.targets) if config.targets is not None else list(table.columns)
    for name in targets:
        table.index_of(name)
    if config.mode == "flat":
        return {name: np.full(table.n_rows, config.flat_probability) for name in targets}
    if table.n_cols < 3 and config.donors is None:
        raise ConfigError("MAR injection with default donors needs at least 3 columns")

    donors = default_donors(table.columns)
    if config.donors:
        donors.update(config.donors)
    scored: Dict[str, np.ndarray] = {}

    def donor_cdf(name: str) -> np.ndarray:
        if name not in scored:
            column = table.values[:, table.index_of(name)]
            if np.isnan(column).any():
                raise DataError(f"Donor column '{name}' must be fully observed")
            spread = column.std()
            if spread == 0.0:
                raise DataError(f"Donor column '{name}' is constant")
            scored[name] = ndtr((column - column.mean()) / spread)
        return scored[name]

    probabilities = {}
    for name in targets:
        first, second = donors[name]
        if name in (first, second):
            raise ConfigError(f"Column '{name}' cannot be its own missingness donor")
        mean_cdf = 0.5 * (donor_cdf(first) + donor_cdf(second))
        probabilities[name] = np.maximum(0.0, mean_cdf - config.offset)
    return probabilities


def inject_mar(table: DataTable, config: MissingnessConfig, rng: Rng) -> Tuple[DataTable, TruthRecord]:
    """Blank cells on Bernoulli(p) draws and record their true values.

    Probabilities come from the pre-injection table, so a target blanked
    earlier never changes the donors of a later target. Cells that were
    already MISSING are not recorded.
    """
    probabilities = missingness_probabilities(table, config)
    values = np.array(table.values)
    rows, cols, truths = [], [], []
    for name, prob in probabilities.items():
        j = table.index_of(name)
        hit = (rng.random(table.n_rows) < prob) & ~np.isnan(table.values[:, j])
        picked = np.nonzero(hit)[0]
        rows.append(picked)
        cols.append(np.full(picked.size, j, dtype=np.int64))
        truths.append(table.values[picked, j])
        values[picked, j] = np.nan

    rows_all = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
    cols_all = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
    truth_all = np.concatenate(truths) if truths else np.zeros(0)
    order = np.lexsort((rows_all, cols_all))
    truth = TruthRecord(
        rows=rows_all[order], cols=cols_all[order], values=truth_all[order], columns=list(table.columns)
    )
    logger.debug(f"Injected {truth.n_cells} MISSING cells ({config.mode})")
    return table.with_values(values), truth


def missingness_report(before: DataTable, after: DataTable) -> pd.DataFrame:
    """Initial vs added MISSING counts per variable."""
    if list(before.columns) != list(after.columns) or before.values.shape != after.values.shape:
        raise DataError("Missingness report needs two tables of the same shape")
    initial = before.mask.sum(axis=0)
    total = after.mask.sum(axis=0)
    return pd.DataFrame(
        {
            "variable": list(before.columns),
            "initial_missing": initial,
            "added_missing": total - initial,
            "total_missing": total,
            "fraction_missing": total / before.n_rows,
        }
    )


# -------------------- Replicates --------------------
class SimulatedDataset(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    replicate: int
    seed: int
    complete: DataTable
    masked: DataTable
    truth: TruthRecord


def simulate_one(
    config: SimulationConfig, missingness: MissingnessConfig, seed: SeedLike, replicate: int = 0
) -> SimulatedDataset:
    rng = make_rng(seed)
    complete = generate_panel(config, rng)
    masked, truth = inject_mar(complete, missingness, rng)
    return SimulatedDataset(
        replicate=replicate, seed=int(seed), complete=complete, masked=masked, truth=truth
    )


def simulate_replicates(
    config: SimulationConfig,
    missingness: MissingnessConfig,
    replicates: int,
    seeds: Optional[Sequence[int]] = None,
) -> List[SimulatedDataset]:
    """`replicates` datasets on independent substreams of config.seed."""
    if replicates < 1:
        raise ConfigError(f"Replicate count must be >= 1, got {replicates}")
    seeds = seed_ints(config.seed, replicates) if seeds is None else list(seeds)
    return [simulate_one(config, missingness, seed, replicate=r) for r, seed in enumerate(seeds)]
