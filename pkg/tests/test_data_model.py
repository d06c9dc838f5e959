import numpy as np
import pytest

from app.models.table import ColumnKind, DataTable, KindName
from app.services.data_model import (
    add_lags,
    compute_ranks,
    read_csv,
    read_schema,
    source_columns,
    write_csv,
)
from app.utils.errors import ConfigError, DataError, DegenerateColumnError

SCHEMA = {
    "unit": ColumnKind.unit(),
    "time": ColumnKind.time(),
    "x": ColumnKind.continuous(),
    "o": ColumnKind.ordinal(3),
    "b": ColumnKind.binary(),
}


def _write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_read_csv_parses_missing_tokens_and_identifiers(tmp_path):
    path = _write(tmp_path, "unit,time,x,o,b\nA,1,1.5,0,1\nA,2,NA,2,\nB,1,-3,1,0\n")
    table = read_csv(path, SCHEMA)
    assert table.columns == ["x", "o", "b"]
    assert table.unit_name == "unit" and table.time_name == "time"
    assert list(table.units) == ["A", "A", "B"]
    assert list(table.times) == [1, 2, 1]
    assert table.mask.tolist() == [[False, False, False], [True, False, True], [False, False, False]]
    assert table.values[2, 0] == -3.0


def test_read_csv_rejects_ragged_rows(tmp_path):
    path = _write(tmp_path, "unit,time,x,o,b\nA,1,1.5,0,1\nA,2,2.0,1\n")
    with pytest.raises(DataError, match="ragged"):
        read_csv(path, SCHEMA)


def test_read_csv_rejects_duplicate_header(tmp_path):
    path = _write(tmp_path, "x,x\n1,2\n")
    with pytest.raises(DataError, match="duplicate"):
        read_csv(path, {"x": ColumnKind.continuous()})


def test_read_csv_schema_mismatch_is_config_error(tmp_path):
    path = _write(tmp_path, "x,y\n1,2\n3,4\n")
    with pytest.raises(ConfigError):
        read_csv(path, {"x": ColumnKind.continuous(), "z": ColumnKind.continuous()})


def test_read_csv_rejects_unparseable_cell(tmp_path):
    path = _write(tmp_path, "x,y\n1,2\nabc,4\n")
    with pytest.raises(DataError, match="unparseable"):
        read_csv(path, {"x": ColumnKind.continuous(), "y": ColumnKind.continuous()})


def test_read_csv_rejects_binary_outside_zero_one(tmp_path):
    path = _write(tmp_path, "x,b\n1,0\n2,2\n")
    with pytest.raises(DataError, match="Binary"):
        read_csv(path, {"x": ColumnKind.continuous(), "b": ColumnKind.binary()})


def test_read_csv_rejects_too_many_ordinal_levels(tmp_path):
    path = _write(tmp_path, "x,o\n1,0\n2,1\n3,2\n4,3\n")
    with pytest.raises(DataError, match="levels"):
        read_csv(path, {"x": ColumnKind.continuous(), "o": ColumnKind.ordinal(3)})


def test_write_then_read_preserves_values(tmp_path, mixed_table, table_files):
    files = table_files(mixed_table)
    again = read_csv(files["csv"], read_schema(files["schema"]))
    assert again.columns == mixed_table.columns
    assert np.array_equal(again.mask, mixed_table.mask)
    observed = ~mixed_table.mask
    assert np.array_equal(again.values[observed], mixed_table.values[observed])


def test_write_csv_puts_identifiers_first(tmp_path, panel_table):
    path = write_csv(panel_table, tmp_path / "panel.csv")
    header = path.read_text(encoding="utf-8").splitlines()[0]
    assert header == "unit,time,a,b"


def test_column_kind_parse():
    assert ColumnKind.parse("ordinal:3") == ColumnKind.ordinal(3)
    assert ColumnKind.parse("Binary").levels == 2
    assert ColumnKind.parse("time").name == KindName.TIME
    with pytest.raises(ConfigError):
        ColumnKind.parse("categorical")
    with pytest.raises(ConfigError):
        ColumnKind.parse("continuous:4")


def test_read_schema_errors(tmp_path):
    with pytest.raises(ConfigError):
        read_schema(tmp_path / "absent.json")
    bad = _write(tmp_path, "{not json", "schema.json")
    with pytest.raises(ConfigError):
        read_schema(bad)


def test_compute_ranks_groups_ties():
    table = DataTable(
        columns=["v", "w"],
        kinds=[ColumnKind.continuous(), ColumnKind.continuous()],
        values=np.array([[3.0, 1.0], [1.0, 2.0], [3.0, 1.0], [np.nan, 2.0], [2.0, 1.0]]),
    )
    ranks = compute_ranks(table, 0)
    assert ranks.support.tolist() == [1.0, 2.0, 3.0]
    assert ranks.levels.tolist() == [2, 0, 2, -1, 1]
    assert ranks.n_levels == 3


def test_compute_ranks_rejects_constant_column():
    table = DataTable(
        columns=["v"], kinds=[ColumnKind.continuous()], values=np.array([[4.0], [4.0], [np.nan]])
    )
    with pytest.raises(DegenerateColumnError) as info:
        compute_ranks(table, 0)
    assert info.value.distinct == 1


def test_add_lags_shifts_within_units(panel_table):
    lagged = add_lags(panel_table, 2)
    assert lagged.columns == ["a", "b", "a_lag1", "a_lag2", "b_lag1", "b_lag2"]
    a = panel_table.values[:, 0]
    a_lag1 = lagged.values[:, 2]
    for row in range(panel_table.n_rows):
        if panel_table.times[row] == 1:
            assert np.isnan(a_lag1[row])
        else:
            assert a_lag1[row] == a[row - 1]
    # lag 2 is MISSING for the first two periods of every unit
    assert np.isnan(lagged.values[panel_table.times <= 2, 3]).all()
    assert source_columns(lagged) == ["a", "b"]
    assert lagged.lag_columns == ["a_lag1", "a_lag2", "b_lag1", "b_lag2"]
    assert lagged.select(["a", "b_lag2"]).lag_columns == ["b_lag2"]
    assert lagged.with_values(lagged.values).lag_columns == lagged.lag_columns


def test_user_column_named_like_a_lag_is_a_source_column(panel_table):
    renamed = DataTable(
        columns=["a", "a_lag7"],
        kinds=list(panel_table.kinds),
        values=panel_table.values,
        units=panel_table.units,
        times=panel_table.times,
        unit_name=panel_table.unit_name,
        time_name=panel_table.time_name,
    )
    assert source_columns(renamed) == ["a", "a_lag7"]
    lagged = add_lags(renamed, 1, exclude=["a_lag7"])
    assert source_columns(lagged) == ["a", "a_lag7"]
    assert lagged.lag_columns == ["a_lag1"]


def test_add_lags_four_lags_of_five_variables_gives_25_columns():
    rows = 2 * 6
    table = DataTable(
        columns=[f"V{i}" for i in range(1, 6)],
        kinds=[ColumnKind.continuous()] * 5,
        values=np.arange(rows * 5, dtype=float).reshape(rows, 5),
        units=np.repeat(["a", "b"], 6),
        times=np.tile(np.arange(1, 7), 2),
        unit_name="UnitId",
        time_name="TimeId",
    )
    assert add_lags(table, 4).n_cols == 25
    assert add_lags(table, 4, exclude=["V5"]).n_cols == 21


def test_add_lags_errors(panel_table, mixed_table):
    with pytest.raises(ConfigError):
        add_lags(panel_table, 0)
    with pytest.raises(ConfigError):
        add_lags(panel_table, 1, exclude=["nope"])
    with pytest.raises(DataError):
        add_lags(mixed_table, 1)
    duplicated = DataTable(
        columns=["a"],
        kinds=[ColumnKind.continuous()],
        values=np.array([[1.0], [2.0]]),
        units=["u", "u"],
        times=[1, 1],
        unit_name="unit",
        time_name="time",
    )
    with pytest.raises(DataError, match="Duplicate"):
        add_lags(duplicated, 1)


def test_table_rejects_infinite_values():
    with pytest.raises(DataError):
        DataTable(columns=["a"], kinds=[ColumnKind.continuous()], values=np.array([[np.inf], [1.0]]))


def test_missing_cells_are_column_major(mixed_table):
    rows, cols = mixed_table.missing_cells()
    assert np.all(np.diff(cols) >= 0)
    for c in np.unique(cols):
        assert np.all(np.diff(rows[cols == c]) > 0)
    assert mixed_table.mask[rows, cols].all()


def test_ragged_row_line_number_counts_blank_lines(tmp_path):
    path = _write(tmp_path, "unit,time,x,o,b\nA,1,1.5,0,1\n\nA,2,2.0,1\n")
    with pytest.raises(DataError, match="line 4"):
        read_csv(path, SCHEMA)
    path = _write(tmp_path, "unit,time,x,o,b\n\nA,1,1.5,0,1\nA,2,oops,1,0\n", "cells.csv")
    with pytest.raises(DataError, match="Line 4"):
        read_csv(path, SCHEMA)


def test_compute_ranks_unchanged_by_exp(mixed_table):
    values = np.array(mixed_table.values)
    values[:, :2] = np.exp(values[:, :2])
    transformed = mixed_table.with_values(values)
    for j in (0, 1):
        assert np.array_equal(compute_ranks(transformed, j).levels, compute_ranks(mixed_table, j).levels)


def test_written_csv_matches_a_plain_line_parser(tmp_path):
    rng = np.random.default_rng(7)
    values = np.column_stack([1e3 * rng.standard_normal(100), (rng.random(100) < 0.5).astype(float)])
    values[rng.random((100, 2)) < 0.1] = np.nan
    table = DataTable(
        columns=["x", "b"],
        kinds=[ColumnKind.continuous(), ColumnKind.binary()],
        values=values,
        units=np.repeat([f"u{i}" for i in range(10)], 10),
        times=np.tile(np.arange(1, 11), 10),
        unit_name="unit",
        time_name="time",
    )
    path = write_csv(table, tmp_path / "plain.csv")
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "unit,time,x,b"
    assert len(lines) == 101
    for r, line in enumerate(lines[1:]):
        unit_label, period, *cells = line.split(",")
        assert unit_label == table.units[r] and int(period) == table.times[r]
        for c, token in enumerate(cells):
            if np.isnan(values[r, c]):
                assert token == "NA"
            else:
                assert float(token) == values[r, c]

    again = read_csv(path, {"unit": ColumnKind.unit(), "time": ColumnKind.time(), "x": SCHEMA["x"], "b": SCHEMA["b"]})
    assert np.array_equal(again.values, values, equal_nan=True)
