"""Per-column feature vectorizers; stateful encoders are fit on training-fold cells only."""
from __future__ import annotations

import calendar
import json
import math
from dataclasses import dataclass, field
from datetime import datetime

import numpy as np

from .rdb import Database

__all__ = [
    "IQR_FLOOR",
    "DATETIME_WIDTH",
    "ScalarEncoder",
    "CategoricalEncoder",
    "EncodedNode",
    "NodeTypeEncoder",
    "fit_scalar",
    "encode_latlong",
    "encode_datetime",
    "encode_text",
    "encode_categorical",
    "fit_encoders",
    "encode_node",
    "encoders_to_json",
    "encoders_from_json",
]

IQR_FLOOR = 1e-9

# year 1 + month 12 + week 53 + day 31 + weekday 7 + day-of-year 1 + six flags one-hot(2) + four cos/sin pairs
DATETIME_WIDTH = 1 + 12 + 53 + 31 + 7 + 1 + 12 + 8

COLUMN_DENSE_WIDTH = {"scalar": 2, "latlong": 6, "datetime": 1 + DATETIME_WIDTH, "text": 3}


@dataclass(frozen=True)
class ScalarEncoder:
    median: float
    iqr: float
    all_null: bool = False

    def encode(self, value: float | None) -> tuple[float, float]:
        """Returns (scaled value, null flag)."""
        if value is None or self.all_null:
            return 0.0, 1.0
        return (value - self.median) / self.iqr, 0.0


def fit_scalar(cells) -> ScalarEncoder:
    values = np.asarray([v for v in cells if v is not None], dtype=np.float64)
    if len(values) == 0:
        return ScalarEncoder(0.0, 1.0, all_null=True)
    q1, med, q3 = np.quantile(values, [0.25, 0.5, 0.75])
    return ScalarEncoder(float(med), max(float(q3 - q1), IQR_FLOOR))


@dataclass(frozen=True)
class CategoricalEncoder:
    vocabulary: dict[str, int]  # token -> index in [0, C)

    @property
    def cardinality(self) -> int:
        return len(self.vocabulary)

    @property
    def null_index(self) -> int:
        return len(self.vocabulary)  # reserved for null and unseen tokens

    @property
    def embedding_dim(self) -> int:
        return min(32, self.cardinality)


def fit_categorical(cells) -> CategoricalEncoder:
    vocab = sorted({v for v in cells if v is not None})
    return CategoricalEncoder({token: i for i, token in enumerate(vocab)})


def encode_categorical(token: str | None, encoder: CategoricalEncoder) -> int:
    if token is None:
        return encoder.null_index
    return encoder.vocabulary.get(token, encoder.null_index)


def encode_latlong(cell: tuple[float, float] | None) -> np.ndarray:
    """[cos(lat)cos(long), cos(lat)sin(long), sin(lat), lat/90, long/180] + null flag."""
    if cell is None:
        return np.array([0.0] * 5 + [1.0])
    lat, long = cell
    la, lo = math.radians(lat), math.radians(long)
    return np.array([
        math.cos(la) * math.cos(lo),
        math.cos(la) * math.sin(lo),
        math.sin(la),
        lat / 90.0,
        long / 180.0,
        0.0,
    ])


def _one_hot(width: int, index: int) -> np.ndarray:
    out = np.zeros(width)
    out[index] = 1.0
    return out


def _cyc(value: float, period: float) -> list[float]:
    angle = 2.0 * math.pi * value / period
    return [math.cos(angle), math.sin(angle)]


def encode_datetime(stamp: datetime | None, year_encoder: ScalarEncoder) -> np.ndarray:
    if stamp is None:
        return np.concatenate([np.zeros(DATETIME_WIDTH), [1.0]])
    date = stamp.date()
    days_in_month = calendar.monthrange(date.year, date.month)[1]
    days_in_year = 366 if calendar.isleap(date.year) else 365
    doy = date.timetuple().tm_yday
    weekday = date.isoweekday()  # Monday=1 .. Sunday=7
    quarter_end_month = date.month in (3, 6, 9, 12)
    quarter_start_month = date.month in (1, 4, 7, 10)
    flags = [
        date.day == days_in_month,                       # month end
        date.day == 1,                                   # month start
        quarter_end_month and date.day == days_in_month,  # quarter end
        quarter_start_month and date.day == 1,           # quarter start
        date.month == 12 and date.day == 31,             # year end
        date.month == 1 and date.day == 1,               # year start
    ]
    parts = [
        np.array([year_encoder.encode(float(date.year))[0]]),
        _one_hot(12, date.month - 1),
        _one_hot(53, date.isocalendar().week - 1),
        _one_hot(31, date.day - 1),
        _one_hot(7, weekday - 1),
        np.array([doy / 366.0]),
    ]
    for flag in flags:
        parts.append(_one_hot(2, int(flag)))
    cyclic = (
        _cyc(weekday, 7)
        + _cyc(date.day, days_in_month)
        + _cyc(date.month, 12)
        + _cyc(doy, days_in_year)
    )
    parts.append(np.array(cyclic))
    parts.append(np.array([0.0]))  # null flag
    return np.concatenate(parts)


def text_counts(value: str) -> tuple[float, float]:
    return float(len(value.split())), float(len(value))


def encode_text(value: str | None, word_encoder: ScalarEncoder, char_encoder: ScalarEncoder) -> np.ndarray:
    if value is None:
        return np.array([0.0, 0.0, 1.0])
    words, chars = text_counts(value)
    return np.array([word_encoder.encode(words)[0], char_encoder.encode(chars)[0], 0.0])


@dataclass
class EncodedNode:
    dense: np.ndarray
    cat_indices: np.ndarray  # one index per categorical feature column of the node type


@dataclass
class NodeTypeEncoder:
    """Fitted per-table column encoders; key and target columns contribute nothing."""

    table: int
    dense_columns: list[tuple[int, str]]  # (column index, kind tag)
    cat_columns: list[int]
    scalar: dict[int, ScalarEncoder] = field(default_factory=dict)
    year: dict[int, ScalarEncoder] = field(default_factory=dict)
    text: dict[int, tuple[ScalarEncoder, ScalarEncoder]] = field(default_factory=dict)
    categorical: dict[int, CategoricalEncoder] = field(default_factory=dict)

    @property
    def dense_width(self) -> int:
        return sum(COLUMN_DENSE_WIDTH[tag] for _, tag in self.dense_columns)

    @property
    def embedding_dims(self) -> list[int]:
        return [self.categorical[ci].embedding_dim for ci in self.cat_columns]

    @property
    def input_width(self) -> int:
        return self.dense_width + sum(self.embedding_dims)


def fit_encoders(db: Database, train_rows: dict[int, list[int]]) -> list[NodeTypeEncoder]:
    """Fit one NodeTypeEncoder per table on the given training rows only."""
    encoders = []
    for ti, table in enumerate(db.tables):
        rows = train_rows.get(ti, [])
        dense_columns: list[tuple[int, str]] = []
        cat_columns: list[int] = []
        enc = NodeTypeEncoder(ti, dense_columns, cat_columns)
        for ci, col in enumerate(table.columns):
            tag = col.kind.tag
            if tag in ("primary_key", "foreign_key") or col.target:
                continue
            cells = [col.values[r] for r in rows]
            if tag == "scalar":
                dense_columns.append((ci, tag))
                enc.scalar[ci] = fit_scalar(cells)
            elif tag == "latlong":
                dense_columns.append((ci, tag))
            elif tag == "datetime":
                dense_columns.append((ci, tag))
                enc.year[ci] = fit_scalar([float(v.year) for v in cells if v is not None])
            elif tag == "text":
                dense_columns.append((ci, tag))
                counts = [text_counts(v) for v in cells if v is not None]
                enc.text[ci] = (
                    fit_scalar([w for w, _ in counts]),
                    fit_scalar([c for _, c in counts]),
                )
            elif tag == "categorical":
                cat_columns.append(ci)
                enc.categorical[ci] = fit_categorical(cells)
        encoders.append(enc)
    return encoders


def encode_node(db: Database, table: int, row: int, encoder: NodeTypeEncoder) -> EncodedNode:
    columns = db.tables[table].columns
    parts = []
    for ci, tag in encoder.dense_columns:
        value = columns[ci].values[row]
        if tag == "scalar":
            parts.append(np.array(encoder.scalar[ci].encode(value)))
        elif tag == "latlong":
            parts.append(encode_latlong(value))
        elif tag == "datetime":
            parts.append(encode_datetime(value, encoder.year[ci]))
        elif tag == "text":
            parts.append(encode_text(value, *encoder.text[ci]))
    dense = np.concatenate(parts) if parts else np.zeros(0)
    cats = np.array(
        [encode_categorical(columns[ci].values[row], encoder.categorical[ci]) for ci in encoder.cat_columns],
        dtype=np.int64,
    )
    return EncodedNode(dense, cats)


def encoders_to_json(encoders: list[NodeTypeEncoder]) -> str:
    payload = []
    for enc in encoders:
        payload.append({
            "table": enc.table,
            "dense_columns": [[ci, tag] for ci, tag in enc.dense_columns],
            "cat_columns": enc.cat_columns,
            "scalar": {str(k): [v.median, v.iqr, v.all_null] for k, v in enc.scalar.items()},
            "year": {str(k): [v.median, v.iqr, v.all_null] for k, v in enc.year.items()},
            "text": {
                str(k): [[w.median, w.iqr, w.all_null], [c.median, c.iqr, c.all_null]]
                for k, (w, c) in enc.text.items()
            },
            "categorical": {str(k): v.vocabulary for k, v in enc.categorical.items()},
        })
    return json.dumps(payload, sort_keys=True)


def encoders_from_json(text: str) -> list[NodeTypeEncoder]:
    out = []
    for item in json.loads(text):
        enc = NodeTypeEncoder(
            item["table"],
            [(ci, tag) for ci, tag in item["dense_columns"]],
            list(item["cat_columns"]),
        )
        enc.scalar = {int(k): ScalarEncoder(*v) for k, v in item["scalar"].items()}
        enc.year = {int(k): ScalarEncoder(*v) for k, v in item["year"].items()}
        enc.text = {int(k): (ScalarEncoder(*w), ScalarEncoder(*c)) for k, (w, c) in item["text"].items()}
        enc.categorical = {int(k): CategoricalEncoder(dict(v)) for k, v in item["categorical"].items()}
        out.append(enc)
    return out
