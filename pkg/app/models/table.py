from __future__ import annotations

from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.utils.errors import ConfigError, DataError


# === Column Typing ===
class KindName(str, Enum):
    CONTINUOUS = "continuous"
    ORDINAL = "ordinal"
    BINARY = "binary"
    UNIT = "unit"
    TIME = "time"


class ColumnKind(BaseModel):
    """Kind of a column; Binary samples exactly like a 2-level Ordinal."""

    model_config = ConfigDict(frozen=True)

    name: KindName
    levels: Optional[int] = None  # ordinal level count, when declared

    @property
    def is_identifier(self) -> bool:
        return self.name in (KindName.UNIT, KindName.TIME)

    @property
    def is_discrete(self) -> bool:
        return self.name in (KindName.ORDINAL, KindName.BINARY)

    @property
    def is_continuous(self) -> bool:
        return self.name == KindName.CONTINUOUS

    @classmethod
    def continuous(cls) -> "ColumnKind":
        return cls(name=KindName.CONTINUOUS)

    @classmethod
    def ordinal(cls, levels: Optional[int] = None) -> "ColumnKind":
        return cls(name=KindName.ORDINAL, levels=levels)

    @classmethod
    def binary(cls) -> "ColumnKind":
        return cls(name=KindName.BINARY, levels=2)

    @classmethod
    def unit(cls) -> "ColumnKind":
        return cls(name=KindName.UNIT)

    @classmethod
    def time(cls) -> "ColumnKind":
        return cls(name=KindName.TIME)

    @classmethod
    def parse(cls, text: str) -> "ColumnKind":
        """Parse a schema kind string: continuous | ordinal[:levels] | binary | unit | time."""
        raw = str(text).strip().lower()
        head, _, tail = raw.partition(":")
        try:
            kind = KindName(head)
        except ValueError:
            raise ConfigError(f"Unknown column kind '{text}'") from None
        if kind == KindName.BINARY:
            return cls.binary()
        if tail:
            if kind != KindName.ORDINAL or not tail.isdigit() or int(tail) < 2:
                raise ConfigError(f"Invalid level count in column kind '{text}'")
            return cls.ordinal(int(tail))
        return cls(name=kind)

    def label(self) -> str:
        if self.name == KindName.ORDINAL and self.levels:
            return f"ordinal:{self.levels}"
        return self.name.value


# === Dataset ===
def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


class DataTable(BaseModel):
    """Rectangular mixed-type dataset.

    `values` holds the copula (data) columns as float64 with NaN marking a
    MISSING cell; finite payloads only. Unit and time identifiers live beside
    the data and never enter the copula.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    columns: List[str]
    kinds: List[ColumnKind]
    values: np.ndarray
    units: Optional[np.ndarray] = None
    times: Optional[np.ndarray] = None
    unit_name: Optional[str] = None
    time_name: Optional[str] = None
    lag_columns: List[str] = Field(default_factory=list)  # generated by add_lags

    @model_validator(mode="before")
    @classmethod
    def _freeze_arrays(cls, data):
        if isinstance(data, dict):
            data = dict(data)
            data["values"] = _frozen(np.asarray(data.get("values"), dtype=np.float64))
            if data.get("units") is not None:
                data["units"] = _frozen(np.asarray(data["units"]).astype(str).astype(object))
            if data.get("times") is not None:
                data["times"] = _frozen(np.asarray(data["times"], dtype=np.int64))
        return data

    @model_validator(mode="after")
    def _check_shape(self) -> "DataTable":
        if self.values.ndim != 2:
            raise DataError("DataTable values must be a 2-D array")
        n, p = self.values.shape
        if len(self.columns) != p or len(self.kinds) != p:
            raise DataError(f"Expected {p} column names and kinds, got {len(self.columns)} and {len(self.kinds)}")
        names = list(self.columns) + [x for x in (self.unit_name, self.time_name) if x is not None]
        if len(set(names)) != len(names):
            raise DataError(f"Column names must be unique: {names}")
        if not set(self.lag_columns) <= set(self.columns):
            raise DataError(f"Lag columns {sorted(set(self.lag_columns) - set(self.columns))} are not data columns")
        if any(kind.is_identifier for kind in self.kinds):
            raise DataError("Unit/time identifiers cannot be data columns")
        if np.isinf(self.values).any():
            raise DataError("Infinite cell values are not allowed")
        for ids, name in ((self.units, self.unit_name), (self.times, self.time_name)):
            if ids is not None and (ids.shape != (n,) or name is None):
                raise DataError("Identifier columns must be named and have one label per row")
        for j, kind in enumerate(self.kinds):
            if kind.name == KindName.BINARY:
                col = self.values[:, j]
                observed = col[~np.isnan(col)]
                if not np.isin(observed, (0.0, 1.0)).all():
                    raise DataError(f"Binary column '{self.columns[j]}' has values outside {{0, 1}}")
        return self

    # -------------------- shape & mask --------------------
    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    @property
    def mask(self) -> np.ndarray:
        """MissingMask: n×p booleans, True where the cell is MISSING."""
        return np.isnan(self.values)

    @property
    def has_panel_index(self) -> bool:
        return self.units is not None and self.times is not None

    def missing_cells(self) -> Tuple[np.ndarray, np.ndarray]:
        """(rows, cols) of MISSING cells in column-major order, rows ascending."""
        cols, rows = np.nonzero(self.mask.T)
        return rows, cols

    def index_of(self, name: str) -> int:
        try:
            return self.columns.index(name)
        except ValueError:
            raise ConfigError(f"Unknown column '{name}'") from None

    # -------------------- derived tables --------------------
    def with_values(self, values: np.ndarray) -> "DataTable":
        return DataTable(
            columns=list(self.columns),
            kinds=list(self.kinds),
            values=values,
            units=self.units,
            times=self.times,
            unit_name=self.unit_name,
            time_name=self.time_name,
            lag_columns=list(self.lag_columns),
        )

    def select(self, names: Sequence[str]) -> "DataTable":
        idx = [self.index_of(name) for name in names]
        return DataTable(
            columns=[self.columns[j] for j in idx],
            kinds=[self.kinds[j] for j in idx],
            values=self.values[:, idx],
            units=self.units,
            times=self.times,
            unit_name=self.unit_name,
            time_name=self.time_name,
            lag_columns=[c for c in self.lag_columns if c in names],
        )

    def append_columns(
        self, names: Sequence[str], kinds: Sequence[ColumnKind], values: np.ndarray, lags: bool = False
    ) -> "DataTable":
        return DataTable(
            columns=list(self.columns) + list(names),
            kinds=list(self.kinds) + list(kinds),
            values=np.hstack([self.values, np.asarray(values, dtype=np.float64).reshape(self.n_rows, -1)]),
            units=self.units,
            times=self.times,
            unit_name=self.unit_name,
            time_name=self.time_name,
            lag_columns=list(self.lag_columns) + (list(names) if lags else []),
        )

    def to_frame(self) -> pd.DataFrame:
        """pandas view: identifiers first, then data columns; MISSING as NaN."""
        frame = pd.DataFrame(np.array(self.values), columns=list(self.columns))
        if self.times is not None:
            frame.insert(0, self.time_name, np.array(self.times))
        if self.units is not None:
            frame.insert(0, self.unit_name, np.array(self.units))
        return frame


class ColumnRanks(BaseModel):
    """Rank structure of one column: sorted distinct observed values and a
    level index per cell (-1 for MISSING). Tied values share a level."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    column: int
    support: np.ndarray
    levels: np.ndarray

    @property
    def n_levels(self) -> int:
        return int(self.support.size)

    @property
    def observed(self) -> np.ndarray:
        return self.levels >= 0
