#!/usr/bin/env python3
"""
Observation table utilities

Loads CSV files into an immutable, typed table (numeric or categorical columns),
applies complete-case deletion over the declared columns and reports the dropped count.
"""

import logging
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict

from utils.errors import ConfigurationError, IngestionError

logger = logging.getLogger(__name__)

NUMERIC = "numeric"
CATEGORICAL = "categorical"

# Cell markers treated as missing on ingestion
MISSING_MARKERS = ["", "NA", "NaN", "nan", "null", "NULL"]


class ColumnSpec(BaseModel):
    """Declared type of one column; categorical columns may fix their level order"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    type: Literal["numeric", "categorical"] = NUMERIC
    levels: Optional[List[str]] = None


TableSchema = Dict[str, ColumnSpec]


class ObservationTable:
    """Immutable table of typed columns. Accessors hand out copies."""

    def __init__(self, frame: pd.DataFrame, levels: Dict[str, List[str]],
                 dropped_rows: int = 0, source: Optional[str] = None):
        self._frame = frame
        self._levels = {name: list(values) for name, values in levels.items()}
        self.dropped_rows = dropped_rows
        self.source = source

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, schema: TableSchema,
                   source: Optional[str] = None, line_offset: int = 2) -> "ObservationTable":
        """
        Build a validated table from a raw frame.

        Args:
            frame: raw values; only the columns named in ``schema`` are kept
            schema: column name -> ColumnSpec
            source: where the data came from (reported in diagnostics)
            line_offset: added to the positional row index when naming rows in errors
                (2 for a CSV with a header line)
        """
        missing = [name for name in schema if name not in frame.columns]
        if missing:
            raise ConfigurationError(f"Declared columns not found in data: {missing}")

        raw = frame.loc[:, list(schema)].reset_index(drop=True)
        is_missing = raw.isna()
        for name in schema:
            column = raw[name]
            if column.dtype == object:
                is_missing[name] |= column.astype(str).str.strip().isin(MISSING_MARKERS)
        incomplete = is_missing.any(axis=1).to_numpy()
        dropped = int(incomplete.sum())
        line_numbers = np.flatnonzero(~incomplete) + line_offset
        raw = raw.loc[~incomplete].reset_index(drop=True)

        columns = {}
        levels: Dict[str, List[str]] = {}
        for name, spec in schema.items():
            if spec.type == NUMERIC:
                columns[name] = _parse_numeric(raw[name], name, line_numbers)
            else:
                labels = raw[name].astype(str).str.strip()
                declared = spec.levels
                if declared is not None:
                    undeclared = ~labels.isin(declared).to_numpy()
                    if undeclared.any():
                        position = int(np.flatnonzero(undeclared)[0])
                        line = int(line_numbers[position])
                        raise IngestionError(
                            f"Value {labels.iloc[position]!r} at line {line}, column '{name}' "
                            f"is not one of the declared levels {declared}",
                            row=line, column=name)
                    level_order = list(declared)
                else:
                    level_order = [str(value) for value in pd.unique(labels)]
                columns[name] = pd.Categorical(labels, categories=level_order)
                levels[name] = level_order

        table_frame = pd.DataFrame(columns, index=pd.RangeIndex(len(raw)))
        return cls(table_frame, levels, dropped_rows=dropped, source=source)

    @property
    def n_rows(self) -> int:
        return len(self._frame)

    @property
    def column_names(self) -> List[str]:
        return list(self._frame.columns)

    @property
    def schema(self) -> TableSchema:
        return {
            name: ColumnSpec(type=CATEGORICAL, levels=self._levels[name]) if name in self._levels
            else ColumnSpec(type=NUMERIC)
            for name in self._frame.columns
        }

    def has_column(self, name: str) -> bool:
        return name in self._frame.columns

    def is_categorical(self, name: str) -> bool:
        self._require(name)
        return name in self._levels

    def levels(self, name: str) -> List[str]:
        if not self.is_categorical(name):
            raise ConfigurationError(f"Column '{name}' is numeric and has no levels")
        return list(self._levels[name])

    def level_map(self) -> Dict[str, List[str]]:
        return {name: list(values) for name, values in self._levels.items()}

    def column(self, name: str) -> np.ndarray:
        """Numeric columns as float64, categorical columns as an object array of labels"""
        self._require(name)
        series = self._frame[name]
        if name in self._levels:
            return series.astype(str).to_numpy(dtype=object)
        return series.to_numpy(dtype=float, copy=True)

    def codes(self, name: str) -> np.ndarray:
        """Integer level positions for a categorical column"""
        if not self.is_categorical(name):
            raise ConfigurationError(f"Column '{name}' is numeric and has no level codes")
        return self._frame[name].cat.codes.to_numpy(dtype=np.int64, copy=True)

    def to_frame(self, columns: Optional[Sequence[str]] = None) -> pd.DataFrame:
        if columns is None:
            return self._frame.copy()
        for name in columns:
            self._require(name)
        return self._frame.loc[:, list(columns)].copy()

    def take(self, indices: Union[Sequence[int], np.ndarray]) -> "ObservationTable":
        """Rows at the given positions (repeats allowed), as a new table"""
        positions = np.asarray(indices, dtype=np.int64)
        frame = self._frame.iloc[positions].reset_index(drop=True)
        return ObservationTable(frame, self._levels, dropped_rows=0, source=self.source)

    def subset(self, mask: np.ndarray) -> "ObservationTable":
        return self.take(np.flatnonzero(np.asarray(mask, dtype=bool)))

    def with_column(self, name: str, values: Union[Sequence, np.ndarray],
                    levels: Optional[List[str]] = None) -> "ObservationTable":
        """Copy of the table with one column added or replaced"""
        if len(values) != self.n_rows:
            raise ConfigurationError(
                f"Column '{name}' has {len(values)} entries, table has {self.n_rows} rows")
        frame = self._frame.copy()
        new_levels = dict(self._levels)
        if levels is not None:
            labels = pd.Series(np.asarray(values, dtype=object)).astype(str)
            if not labels.isin(levels).all():
                raise IngestionError(f"Column '{name}' has values outside levels {levels}", column=name)
            frame[name] = pd.Categorical(labels, categories=list(levels))
            new_levels[name] = list(levels)
        else:
            frame[name] = np.asarray(values, dtype=float)
            new_levels.pop(name, None)
        return ObservationTable(frame, new_levels, dropped_rows=self.dropped_rows, source=self.source)

    def drop_column(self, name: str) -> "ObservationTable":
        self._require(name)
        levels = {key: value for key, value in self._levels.items() if key != name}
        return ObservationTable(self._frame.drop(columns=[name]), levels,
                                dropped_rows=self.dropped_rows, source=self.source)

    def _require(self, name: str):
        if name not in self._frame.columns:
            raise ConfigurationError(f"Column '{name}' is not in the table")

    def __len__(self) -> int:
        return self.n_rows

    def __repr__(self) -> str:
        return f"ObservationTable(n_rows={self.n_rows}, columns={self.column_names})"


def _parse_numeric(column: pd.Series, name: str, line_numbers: np.ndarray) -> np.ndarray:
    if column.dtype == object:
        column = column.astype(str).str.strip()
    parsed = pd.to_numeric(column, errors="coerce")
    values = parsed.to_numpy(dtype=float)
    bad = ~np.isfinite(values)
    if bad.any():
        position = int(np.flatnonzero(bad)[0])
        line = int(line_numbers[position])
        raise IngestionError(
            f"Unparseable numeric value {column.iloc[position]!r} at line {line}, column '{name}'",
            row=line, column=name)
    return values


def load_table(path: Union[str, Path], schema: TableSchema) -> ObservationTable:
    """
    Load a CSV file (header row required, UTF-8) into an ObservationTable.

    Rows with a missing value in any declared column are dropped and counted.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"Data file not found: {path}")

    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, na_values=MISSING_MARKERS,
                          encoding="utf-8")
    except pd.errors.EmptyDataError as e:
        raise IngestionError(f"Data file {path} has no header row") from e
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise IngestionError(f"Could not parse {path}: {e}") from e

    table = ObservationTable.from_frame(raw, schema, source=str(path))
    if table.dropped_rows:
        logger.warning(f"⚠️ Dropped {table.dropped_rows} rows with missing values in declared columns")
    logger.info(f"✅ Loaded {table.n_rows} rows x {len(schema)} columns from {path}")
    return table
