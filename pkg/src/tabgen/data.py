"""CSV loading, schema inference, and invertible per-column transforms.

Continuous columns are mapped through an empirical-quantile transform onto a
normal distribution scaled to variance 0.5; categorical columns are ordinal
encoded against a sorted vocabulary. Missing cells (empty CSV fields) are
filled with the column mean (continuous) or mapped to a reserved sentinel
category (categorical) before the model ever sees them.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"

#: Reserved category appended to a vocabulary when the raw column has missing cells.
MISSING_TOKEN = "__missing__"

#: Continuous columns are inferred only above this distinct-value count.
CATEGORICAL_THRESHOLD = 20

#: Quantile knot budget per continuous column.
MAX_QUANTILE_KNOTS = 1000

#: Output scale for encoded continuous values (variance 0.5).
CONTINUOUS_SCALE = math.sqrt(0.5)

# CDF probabilities are clipped away from {0, 1} so the normal quantile stays finite.
_P_EPS = 1e-7


class ParseError(ValueError):
    """Malformed CSV input (ragged row, empty table, unreadable field)."""


class EncodeError(ValueError):
    """Raw value cannot be encoded under the fitted transforms."""


class DecodeError(ValueError):
    """Encoded value is invalid for its column (e.g. out-of-range category index)."""


@dataclass(frozen=True)
class Column:
    """One column descriptor: name, kind, and (for categorical) its vocabulary."""

    name: str
    kind: str
    vocabulary: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in (CONTINUOUS, CATEGORICAL):
            raise ValueError(f"unknown column kind {self.kind!r}")
        if self.kind == CATEGORICAL:
            if len(set(self.vocabulary)) != len(self.vocabulary):
                raise ValueError(f"column {self.name!r}: duplicate vocabulary entries")

    @property
    def cardinality(self) -> int:
        return len(self.vocabulary)


@dataclass(frozen=True)
class TableSchema:
    """Ordered column descriptors for one table."""

    columns: tuple[Column, ...]

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise ValueError("duplicate column names in schema")
        if not self.columns:
            raise ValueError("schema must have at least one column")

    @property
    def ncols(self) -> int:
        return len(self.columns)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    def continuous_indices(self) -> list[int]:
        return [i for i, c in enumerate(self.columns) if c.kind == CONTINUOUS]

    def categorical_indices(self) -> list[int]:
        return [i for i, c in enumerate(self.columns) if c.kind == CATEGORICAL]

    def index_of(self, name: str) -> int:
        for i, c in enumerate(self.columns):
            if c.name == name:
                return i
        raise KeyError(name)

    def to_json_obj(self) -> dict:
        cols = []
        for c in self.columns:
            entry: dict = {"name": c.name, "kind": c.kind}
            if c.kind == CATEGORICAL:
                entry["vocabulary"] = list(c.vocabulary)
            cols.append(entry)
        return {"columns": cols}

    @classmethod
    def from_json_obj(cls, obj: dict) -> "TableSchema":
        cols = []
        for entry in obj["columns"]:
            cols.append(
                Column(
                    name=entry["name"],
                    kind=entry["kind"],
                    vocabulary=tuple(entry.get("vocabulary", ())),
                )
            )
        return cls(columns=tuple(cols))


@dataclass
class RawTable:
    """Header plus rows of raw cells; ``None`` marks a missing (empty) field."""

    header: list[str]
    rows: list[list]

    @property
    def nrows(self) -> int:
        return len(self.rows)

    def column(self, j: int) -> list:
        return [row[j] for row in self.rows]


@dataclass
class ContinuousTransform:
    """Empirical quantile map to a normal scaled to variance 0.5.

    ``quantiles[k]`` is the empirical quantile of the fitting column at
    probability ``k / (K - 1)``. Encoding interpolates the CDF rank of a value
    between knots, clips it away from {0, 1}, and applies the inverse normal
    CDF times sqrt(0.5). Values outside the fitted range clamp to the extreme
    knots. A constant fitting column degenerates to encode -> 0, decode -> the
    constant.
    """

    quantiles: np.ndarray
    mean_fill: float

    @property
    def probs(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, len(self.quantiles))

    @property
    def is_constant(self) -> bool:
        return self.quantiles[0] == self.quantiles[-1]

    def encode(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if self.is_constant:
            return np.zeros_like(values)
        p = np.interp(values, self.quantiles, self.probs)
        p = np.clip(p, _P_EPS, 1.0 - _P_EPS)
        return ndtri(p) * CONTINUOUS_SCALE

    def decode(self, encoded: np.ndarray) -> np.ndarray:
        encoded = np.asarray(encoded, dtype=np.float64)
        if self.is_constant:
            return np.full_like(encoded, self.quantiles[0])
        p = ndtr(encoded / CONTINUOUS_SCALE)
        return np.interp(p, self.probs, self.quantiles)

    def to_json_obj(self) -> dict:
        return {
            "kind": CONTINUOUS,
            "quantiles": [float(q) for q in self.quantiles],
            "mean_fill": float(self.mean_fill),
        }


@dataclass
class CategoricalTransform:
    """Ordinal map between category strings and integer indices."""

    vocabulary: tuple[str, ...]
    index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {v: i for i, v in enumerate(self.vocabulary)}

    def encode_one(self, value, column_name: str) -> int:
        if value is None:
            value = MISSING_TOKEN
        idx = self.index.get(value)
        if idx is None:
            raise EncodeError(
                f"column {column_name!r}: unseen category {value!r}"
            )
        return idx

    def decode_one(self, idx: int, column_name: str):
        if not 0 <= idx < len(self.vocabulary):
            raise DecodeError(
                f"column {column_name!r}: category index {idx} out of range "
                f"(vocabulary size {len(self.vocabulary)})"
            )
        value = self.vocabulary[idx]
        return None if value == MISSING_TOKEN else value

    def to_json_obj(self) -> dict:
        return {"kind": CATEGORICAL, "vocabulary": list(self.vocabulary)}


def transform_from_json_obj(obj: dict):
    if obj["kind"] == CONTINUOUS:
        return ContinuousTransform(
            quantiles=np.asarray(obj["quantiles"], dtype=np.float64),
            mean_fill=float(obj["mean_fill"]),
        )
    return CategoricalTransform(vocabulary=tuple(obj["vocabulary"]))


@dataclass
class EncodedTable:
    """Numeric matrix ready for the model: reals for continuous cells,
    integer indices (stored as floats) for categorical cells."""

    values: np.ndarray
    schema: TableSchema
    transforms: list

    @property
    def nrows(self) -> int:
        return self.values.shape[0]


def _parse_float(cell: str):
    """Return a finite float or None when the cell is not a number."""
    try:
        v = float(cell)
    except (TypeError, ValueError):
        return None
    return v if math.isfinite(v) else None


def load_csv(path, schema_overrides: dict | None = None) -> tuple[RawTable, TableSchema]:
    """Read an RFC-4180 CSV (header required, empty field = missing) and infer
    the schema.

    A column is inferred continuous iff every non-missing cell parses as a
    finite real number and the distinct-value count exceeds
    ``CATEGORICAL_THRESHOLD``; otherwise it is categorical with a
    lexicographically sorted vocabulary (plus the missing sentinel, last, when
    the column has missing cells). Entries in ``schema_overrides`` (mapping
    column name to :class:`Column`) win over inference; an override without a
    vocabulary gets one from the data.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        rows = []
        for rownum, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"{path}: row {rownum} has {len(row)} fields, expected {len(header)}"
                )
            rows.append([cell if cell != "" else None for cell in row])
    if not rows:
        raise ParseError(f"{path}: no data rows")
    table = RawTable(header=header, rows=rows)
    schema = infer_schema(table, schema_overrides)
    return table, schema


def infer_schema(table: RawTable, schema_overrides: dict | None = None) -> TableSchema:
    overrides = schema_overrides or {}
    columns = []
    for j, name in enumerate(table.header):
        override = overrides.get(name)
        cells = table.column(j)
        if override is not None and override.kind == CONTINUOUS:
            columns.append(Column(name=name, kind=CONTINUOUS))
            continue
        if override is not None and override.vocabulary:
            vocab = override.vocabulary
            if any(c is None for c in cells) and MISSING_TOKEN not in vocab:
                vocab = vocab + (MISSING_TOKEN,)
            columns.append(Column(name=name, kind=CATEGORICAL, vocabulary=vocab))
            continue
        force_categorical = override is not None
        columns.append(_infer_column(name, cells, force_categorical))
    return TableSchema(columns=tuple(columns))


def _infer_column(name: str, cells: list, force_categorical: bool) -> Column:
    present = [c for c in cells if c is not None]
    parsed = [_parse_float(c) for c in present]
    all_numeric = all(v is not None for v in parsed) and present
    if all_numeric and not force_categorical:
        # Low-cardinality integer codes read as categories; fractional values
        # or a rich value set read as measurements.
        distinct = set(parsed)
        if len(distinct) > CATEGORICAL_THRESHOLD or any(
            not float(v).is_integer() for v in distinct
        ):
            return Column(name=name, kind=CONTINUOUS)
    vocab = sorted(set(present))
    if len(present) < len(cells):
        vocab.append(MISSING_TOKEN)
    return Column(name=name, kind=CATEGORICAL, vocabulary=tuple(vocab))


def fit_transforms(table: RawTable, schema: TableSchema) -> list:
    """Fit one invertible transform per column on the raw table.

    Missing continuous cells are replaced by the column mean before the
    quantile fit; missing categorical cells map to the sentinel category.
    """
    transforms = []
    for j, col in enumerate(schema.columns):
        cells = table.column(j)
        if col.kind == CONTINUOUS:
            transforms.append(_fit_continuous(col.name, cells))
        else:
            transforms.append(CategoricalTransform(vocabulary=col.vocabulary))
    return transforms


def _fit_continuous(name: str, cells: list) -> ContinuousTransform:
    values = []
    for c in cells:
        if c is None:
            values.append(None)
            continue
        v = _parse_float(c) if isinstance(c, str) else float(c)
        if v is None or not math.isfinite(v):
            raise EncodeError(f"column {name!r}: non-numeric value {c!r} in continuous column")
        values.append(v)
    present = [v for v in values if v is not None]
    if not present:
        raise EncodeError(f"column {name!r}: no non-missing values to fit")
    mean_fill = float(np.mean(present))
    filled = np.array([mean_fill if v is None else v for v in values], dtype=np.float64)
    n_knots = min(len(filled), MAX_QUANTILE_KNOTS)
    probs = np.linspace(0.0, 1.0, n_knots)
    quantiles = np.quantile(filled, probs)
    return ContinuousTransform(quantiles=quantiles, mean_fill=mean_fill)


def encode(table: RawTable, schema: TableSchema, transforms: list) -> EncodedTable:
    """Encode a raw table into the numeric matrix the model consumes."""
    n, d = table.nrows, schema.ncols
    out = np.zeros((n, d), dtype=np.float64)
    for j, (col, tf) in enumerate(zip(schema.columns, transforms)):
        cells = table.column(j)
        if col.kind == CONTINUOUS:
            vals = np.empty(n, dtype=np.float64)
            for i, c in enumerate(cells):
                if c is None:
                    vals[i] = tf.mean_fill
                    continue
                v = _parse_float(c) if isinstance(c, str) else float(c)
                if v is None:
                    raise EncodeError(
                        f"column {col.name!r}: non-numeric value {c!r} in continuous column"
                    )
                vals[i] = v
            out[:, j] = tf.encode(vals)
        else:
            for i, c in enumerate(cells):
                out[i, j] = tf.encode_one(c, col.name)
    return EncodedTable(values=out, schema=schema, transforms=transforms)


def decode_value(encoded, col: Column, tf):
    """Decode one encoded cell back to its raw value (float, str, or None)."""
    if col.kind == CONTINUOUS:
        return float(tf.decode(np.asarray([encoded]))[0])
    return tf.decode_one(int(round(float(encoded))), col.name)


def decode_row(encoded_row: np.ndarray, schema: TableSchema, transforms: list) -> list:
    return [
        decode_value(encoded_row[j], col, tf)
        for j, (col, tf) in enumerate(zip(schema.columns, transforms))
    ]


def decode_table(values: np.ndarray, schema: TableSchema, transforms: list) -> RawTable:
    rows = []
    cols = []
    for j, (col, tf) in enumerate(zip(schema.columns, transforms)):
        if col.kind == CONTINUOUS:
            cols.append(tf.decode(values[:, j]))
        else:
            cols.append([tf.decode_one(int(round(v)), col.name) for v in values[:, j]])
    for i in range(values.shape[0]):
        rows.append([cols[j][i] if not isinstance(cols[j], np.ndarray) else float(cols[j][i])
                     for j in range(schema.ncols)])
    return RawTable(header=schema.names, rows=rows)


def format_cell(value) -> str:
    """Render a raw cell for CSV output; None becomes the empty field."""
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(table: RawTable, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(table.header)
        for row in table.rows:
            writer.writerow([format_cell(c) for c in row])
