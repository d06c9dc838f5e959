# data_model.py
# Loading, saving and rank/lag structure of DataTable
# -----------------------------------------------------

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd
from loguru import logger

from app.config import settings
from app.models.table import ColumnKind, ColumnRanks, DataTable, KindName
from app.utils.errors import ConfigError, DataError, DegenerateColumnError


# -------------------- Schema --------------------
def read_schema(path: str | Path) -> Dict[str, ColumnKind]:
    """Read a JSON schema file mapping column name -> kind string."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"Schema file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"Schema file {path} is not valid JSON: {e}") from None
    if not isinstance(raw, dict) or not raw:
        raise ConfigError("Schema must be a non-empty JSON object of column -> kind")
    return {str(name): ColumnKind.parse(kind) for name, kind in raw.items()}


def schema_of(table: DataTable) -> Dict[str, str]:
    """Schema strings for a table (inverse of read_schema)."""
    schema: Dict[str, str] = {}
    if table.unit_name is not None:
        schema[table.unit_name] = KindName.UNIT.value
    if table.time_name is not None:
        schema[table.time_name] = KindName.TIME.value
    for name, kind in zip(table.columns, table.kinds):
        schema[name] = kind.label()
    return schema


# -------------------- CSV --------------------
def _parse_cell(token: str, column: str, line_no: int, missing: frozenset) -> float:
    if token in missing:
        return math.nan
    try:
        value = float(token)
    except ValueError:
        raise DataError(f"Line {line_no}: unparseable numeric cell '{token}' in column '{column}'") from None
    if not math.isfinite(value):
        raise DataError(f"Line {line_no}: non-finite cell '{token}' in column '{column}'")
    return value


def read_csv(
    path: str | Path,
    schema: Dict[str, ColumnKind],
    missing_tokens: Optional[Iterable[str]] = None,
) -> DataTable:
    """Load an RFC-4180 CSV with a mandatory header into a DataTable.

    Cells equal to a missing token (default: settings.missing_tokens) become
    MISSING. Ragged rows, unparseable numbers, duplicate header names and
    schema/header mismatches are rejected.
    """
    missing = frozenset(settings.missing_tokens if missing_tokens is None else missing_tokens)
    # csv.reader keeps short rows short; the pandas tokenizer pads them, which hides raggedness
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            rows = list(csv.reader(f))
    except FileNotFoundError:
        raise DataError(f"Input file not found: {path}") from None

    if not rows:
        raise DataError(f"{path}: header row missing")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        dupes = sorted({h for h in header if header.count(h) > 1})
        raise DataError(f"{path}: duplicate column names {dupes}")
    if set(header) != set(schema):
        raise ConfigError(
            f"Schema/column mismatch: missing from schema {sorted(set(header) - set(schema))}, "
            f"absent from file {sorted(set(schema) - set(header))}"
        )

    numbered = [(line_no, row) for line_no, row in enumerate(rows[1:], start=2) if row]
    body = [row for _, row in numbered]
    line_numbers = [line_no for line_no, _ in numbered]
    for line_no, row in numbered:
        if len(row) != len(header):
            raise DataError(f"{path}: ragged row at line {line_no} ({len(row)} fields, expected {len(header)})")

    unit_name = next((h for h in header if schema[h].name == KindName.UNIT), None)
    time_name = next((h for h in header if schema[h].name == KindName.TIME), None)
    kinds_in_file = [schema[h].name for h in header]
    if kinds_in_file.count(KindName.UNIT) > 1 or kinds_in_file.count(KindName.TIME) > 1:
        raise ConfigError("At most one unit and one time identifier column are allowed")
    data_columns = [h for h in header if not schema[h].is_identifier]
    positions = {h: i for i, h in enumerate(header)}

    values = np.empty((len(body), len(data_columns)), dtype=np.float64)
    for r, row in enumerate(body):
        for c, name in enumerate(data_columns):
            values[r, c] = _parse_cell(row[positions[name]].strip(), name, line_numbers[r], missing)

    units = times = None
    if unit_name is not None:
        units = [row[positions[unit_name]].strip() for row in body]
        if any(u in missing for u in units):
            raise DataError(f"Unit identifier column '{unit_name}' has missing labels")
    if time_name is not None:
        raw_times = [row[positions[time_name]].strip() for row in body]
        try:
            times = [int(t) for t in raw_times]
        except ValueError:
            raise DataError(f"Time identifier column '{time_name}' must hold integers") from None

    for c, name in enumerate(data_columns):
        if np.isnan(values[:, c]).all():
            raise DataError(f"Column '{name}' is entirely MISSING")
        levels = schema[name].levels
        if schema[name].name == KindName.ORDINAL and levels is not None:
            distinct = np.unique(values[~np.isnan(values[:, c]), c]).size
            if distinct > levels:
                raise DataError(f"Ordinal column '{name}' declares {levels} levels but has {distinct}")

    table = DataTable(
        columns=data_columns,
        kinds=[schema[h] for h in data_columns],
        values=values,
        units=units,
        times=times,
        unit_name=unit_name,
        time_name=time_name,
    )
    logger.debug(
        f"Loaded {path}: {table.n_rows} rows × {table.n_cols} data columns, "
        f"{int(table.mask.sum())} MISSING cells"
    )
    return table


def write_csv(table: DataTable, path: str | Path, missing_token: str = "NA") -> Path:
    """Write a DataTable; identifiers first, floats in shortest round-trip form."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = table.to_frame()
    frame.to_csv(path, index=False, na_rep=missing_token, float_format=None, lineterminator="\n")
    return path


# -------------------- Ranks --------------------
def compute_ranks(table: DataTable, j: int) -> ColumnRanks:
    """Tie-grouped rank levels of column j's observed values."""
    column = table.values[:, j]
    observed = ~np.isnan(column)
    support = np.unique(column[observed])
    if support.size < 2:
        raise DegenerateColumnError(table.columns[j], int(support.size))
    levels = np.full(column.shape, -1, dtype=np.int64)
    levels[observed] = np.searchsorted(support, column[observed])
    return ColumnRanks(column=j, support=support, levels=levels)


# -------------------- Lags --------------------
def lag_name(column: str, lag: int) -> str:
    return f"{column}_lag{lag}"


def source_columns(table: DataTable) -> List[str]:
    """Data columns that add_lags did not generate; a user column named like a lag stays."""
    generated = set(table.lag_columns)
    return [c for c in table.columns if c not in generated]


def add_lags(table: DataTable, k: int, exclude: Sequence[str] = ()) -> DataTable:
    """Append v_lag1..v_lagk for every non-excluded data column.

    v_lagℓ at (unit u, time t) is v at (u, t−ℓ); MISSING when that period
    does not exist for the unit. Lags never cross unit boundaries.
    """
    if k < 1:
        raise ConfigError(f"Lag count must be >= 1, got {k}")
    if not table.has_panel_index:
        raise DataError("add_lags requires unit and time identifier columns")
    unknown = set(exclude) - set(table.columns)
    if unknown:
        raise ConfigError(f"Cannot exclude unknown columns {sorted(unknown)}")

    index = pd.MultiIndex.from_arrays([np.array(table.units), np.array(table.times)])
    if index.has_duplicates:
        raise DataError("Duplicate (unit, time) pairs; lags are undefined")

    targets = [j for j, name in enumerate(table.columns) if name not in set(exclude)]
    names, kinds, blocks = [], [], []
    for j in targets:
        for lag in range(1, k + 1):
            name = lag_name(table.columns[j], lag)
            if name in table.columns:
                raise DataError(f"Lag column '{name}' already exists")
            shifted = pd.MultiIndex.from_arrays([np.array(table.units), np.array(table.times) - lag])
            source = index.get_indexer(shifted)
            block = np.full(table.n_rows, np.nan)
            found = source >= 0
            block[found] = table.values[source[found], j]
            names.append(name)
            kinds.append(table.kinds[j])
            blocks.append(block)

    logger.debug(f"Added {len(names)} lag columns (k={k}, excluded={list(exclude)})")
    if not blocks:
        return table
    return table.append_columns(names, kinds, np.column_stack(blocks), lags=True)
