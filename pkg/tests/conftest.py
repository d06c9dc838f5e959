from pathlib import Path
from typing import Dict

import numpy as np
import pytest

from app.models.table import ColumnKind, DataTable
from app.services.data_model import schema_of, write_csv
from app.services.exporters import write_json
from app.services.stat_kernels import make_rng, sample_mvn

MIXED_CORR = np.array(
    [
        [1.0, 0.6, 0.4, 0.3],
        [0.6, 1.0, 0.3, 0.2],
        [0.4, 0.3, 1.0, 0.2],
        [0.3, 0.2, 0.2, 1.0],
    ]
)


def make_mixed_table(n: int = 60, seed: int = 0, missing: float = 0.15) -> DataTable:
    """x, y continuous; o ordinal (4 levels); b binary; MCAR holes except in row 0..3."""
    rng = make_rng(seed)
    z = sample_mvn(np.zeros(4), MIXED_CORR, rng, size=n)
    values = np.column_stack(
        [
            z[:, 0],
            2.0 + 3.0 * z[:, 1],
            np.digitize(z[:, 2], [-0.5, 0.0, 0.7]).astype(float),
            (z[:, 3] > 0.0).astype(float),
        ]
    )
    holes = rng.random(values.shape) < missing
    holes[:4] = False
    values[holes] = np.nan
    return DataTable(
        columns=["x", "y", "o", "b"],
        kinds=[ColumnKind.continuous(), ColumnKind.continuous(), ColumnKind.ordinal(4), ColumnKind.binary()],
        values=values,
    )


def make_panel_table(n_units: int = 3, periods: int = 4) -> DataTable:
    rows = n_units * periods
    values = np.column_stack([np.arange(rows, dtype=float), 10.0 * np.arange(rows, dtype=float)])
    return DataTable(
        columns=["a", "b"],
        kinds=[ColumnKind.continuous(), ColumnKind.continuous()],
        values=values,
        units=np.repeat([f"u{u}" for u in range(n_units)], periods),
        times=np.tile(np.arange(1, periods + 1), n_units),
        unit_name="unit",
        time_name="time",
    )


@pytest.fixture
def rng():
    return make_rng(12345)


@pytest.fixture
def mixed_table() -> DataTable:
    return make_mixed_table()


@pytest.fixture
def panel_table() -> DataTable:
    return make_panel_table()


@pytest.fixture
def table_files(tmp_path: Path):
    """Write a table and its schema; returns (csv path, schema path)."""

    def _write(table: DataTable, name: str = "data") -> Dict[str, Path]:
        csv_path = write_csv(table, tmp_path / f"{name}.csv")
        schema_path = write_json(schema_of(table), tmp_path / f"{name}_schema.json")
        return {"csv": csv_path, "schema": schema_path}

    return _write
