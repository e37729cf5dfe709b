"""CSV ingestion, preprocessing and train/validation/test splits.

Transformed features are standardized with training-split statistics.
Categorical values become integer tokens starting at 1 before standardization;
token 0 is reserved for missing or unseen values. Every missing cell maps to
0.0 in transformed space, which is also the baseline used for masking.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import DTYPE, make_rng

logger = logging.getLogger(__name__)

MISSING_MARKERS = frozenset({"", "?", "na", "nan", "null", "none"})
NUMERIC_THRESHOLD = 0.99
KINDS = ("numeric", "categorical")


class CSVFormatError(ValueError):
    pass


def _is_missing(cell: str) -> bool:
    return cell.strip().lower() in MISSING_MARKERS


def _to_float(cell: str) -> float | None:
    try:
        v = float(cell)
    except ValueError:
        return None
    return v if math.isfinite(v) else None


@dataclass
class ColumnSchema:
    name: str
    kind: str


@dataclass
class DatasetSchema:
    columns: list[ColumnSchema]
    label: str
    task: str
    classes: list[str] = field(default_factory=list)

    @property
    def feature_names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def n_features(self) -> int:
        return len(self.columns)

    @property
    def n_outputs(self) -> int:
        return len(self.classes) if self.task == "multiclass" else 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSchema":
        return cls([ColumnSchema(**c) for c in d["columns"]], d["label"], d["task"], list(d.get("classes", [])))


@dataclass
class RawTable:
    """Feature cells as strings (None = missing) plus the label column."""

    names: list[str]
    cells: dict[str, list[str | None]]
    labels: list[str]

    def __len__(self) -> int:
        return len(self.labels)


def load_csv(path, label: str | None = None, hints: dict[str, str] | None = None,
             task: str | None = None) -> tuple[RawTable, DatasetSchema]:
    """Read a headed CSV file and type its columns.

    ``label`` defaults to the last column. ``hints`` maps column names to
    ``numeric`` or ``categorical``; other columns are numeric when at least 99%
    of their non-missing cells parse as numbers. ``task`` defaults to binary or
    multiclass by label cardinality.
    """
    hints = dict(hints or {})
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CSVFormatError(f"{path}: empty file (a header row is required)") from None
        header = [h.strip() for h in header]
        rows = []
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise CSVFormatError(
                    f"{path}: line {reader.line_num} has {len(row)} fields, expected {len(header)}"
                )
            rows.append(row)
    if not rows:
        raise CSVFormatError(f"{path}: no data rows")
    label = label or header[-1]
    if label not in header:
        raise CSVFormatError(f"{path}: label column {label!r} not found in header {header}")
    for name, kind in hints.items():
        if name not in header:
            raise CSVFormatError(f"{path}: hint for unknown column {name!r}")
        if kind not in KINDS and name != label:
            raise CSVFormatError(f"{path}: hint {kind!r} for {name!r} is not one of {KINDS}")

    li = header.index(label)
    labels = [r[li].strip() for r in rows]
    if any(_is_missing(v) for v in labels):
        raise CSVFormatError(f"{path}: label column {label!r} has missing values")
    names = [h for h in header if h != label]
    cells: dict[str, list[str | None]] = {}
    columns = []
    for name in names:
        j = header.index(name)
        col = [None if _is_missing(r[j]) else r[j].strip() for r in rows]
        kind = hints.get(name) or _infer_kind(col)
        cells[name] = col
        columns.append(ColumnSchema(name, kind))

    if task is None:
        task = "binary" if len(set(labels)) <= 2 else "multiclass"
    classes = [] if task == "regression" else _sorted_classes(labels)
    return RawTable(names, cells, labels), DatasetSchema(columns, label, task, classes)


def _infer_kind(col: list[str | None]) -> str:
    present = [c for c in col if c is not None]
    if not present:
        return "numeric"
    ok = sum(_to_float(c) is not None for c in present)
    return "numeric" if ok >= NUMERIC_THRESHOLD * len(present) else "categorical"


def _sorted_classes(values) -> list[str]:
    uniq = set(values)
    if all(_to_float(v) is not None for v in uniq):
        return sorted(uniq, key=float)
    return sorted(uniq)


def encode_labels(raw: RawTable, schema: DatasetSchema) -> np.ndarray:
    if schema.task == "regression":
        return np.array([float(v) for v in raw.labels], dtype=DTYPE)
    index = {c: i for i, c in enumerate(schema.classes)}
    return np.array([index[v] for v in raw.labels], dtype=np.int64)


@dataclass
class SplitSet:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    seed: int

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.valid), len(self.test)


def _allocate(count: int, fractions) -> list[int]:
    a = int(round(fractions[0] * count))
    b = int(round(fractions[1] * count))
    a = min(a, count)
    b = min(b, count - a)
    return [a, b, count - a - b]


def make_splits(rows: int, fractions=(0.6, 0.2, 0.2), seed: int = 0, labels=None, stratify: bool = False) -> SplitSet:
    """Seeded shuffle split; with ``stratify`` each class is allocated proportionally."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be three non-negative values summing to 1, got {fractions}")
    rng = make_rng(seed, 0x5B1)
    if stratify:
        if labels is None:
            raise ValueError("stratified splits need labels")
        labels = np.asarray(labels)
        parts: list[list[np.ndarray]] = [[], [], []]
        for c in np.unique(labels):
            idx = rng.permutation(np.flatnonzero(labels == c))
            a, b, _ = _allocate(len(idx), fractions)
            for k, chunk in enumerate((idx[:a], idx[a : a + b], idx[a + b :])):
                parts[k].append(chunk)
        train, valid, test = (rng.permutation(np.concatenate(p)) for p in parts)
    else:
        order = rng.permutation(rows)
        a, b, _ = _allocate(rows, fractions)
        train, valid, test = order[:a], order[a : a + b], order[a + b :]
    for name, part in (("train", train), ("validation", valid), ("test", test)):
        if len(part) == 0:
            raise ValueError(f"{name} split would be empty with {rows} rows and fractions {fractions}")
    return SplitSet(np.sort(train), np.sort(valid), np.sort(test), seed)


@dataclass
class Preprocessor:
    """Fitted tokenization and standardization (training split only)."""

    names: list[str]
    kinds: list[str]
    tokens: dict[str, dict[str, int]]
    mean: np.ndarray
    std: np.ndarray
    warnings: list[str] = field(default_factory=list)

    @classmethod
    def fit(cls, raw: RawTable, schema: DatasetSchema, rows) -> "Preprocessor":
        rows = np.asarray(rows, dtype=np.int64)
        names = schema.feature_names
        kinds = [c.kind for c in schema.columns]
        tokens: dict[str, dict[str, int]] = {}
        for name, kind in zip(names, kinds):
            if kind == "categorical":
                seen = sorted({raw.cells[name][i] for i in rows} - {None})
                tokens[name] = {v: t for t, v in enumerate(seen, start=1)}
        pre = cls(names, kinds, tokens, np.zeros(len(names)), np.ones(len(names)))
        codes = pre._codes(raw, rows)
        for j, name in enumerate(names):
            col = codes[:, j]
            col = col[~np.isnan(col)]
            if col.size == 0:
                pre.warnings.append(f"column {name!r} has no observed training values; left unscaled")
                continue
            pre.mean[j] = col.mean()
            sd = col.std()
            if sd == 0:
                pre.warnings.append(f"column {name!r} is constant on the training split; std clamped to 1")
                sd = 1.0
            pre.std[j] = sd
        for w in pre.warnings:
            logger.warning(w)
        return pre

    def _codes(self, raw: RawTable, rows) -> np.ndarray:
        """Numeric values or category tokens, NaN where missing or unseen."""
        out = np.full((len(rows), len(self.names)), np.nan)
        for j, (name, kind) in enumerate(zip(self.names, self.kinds)):
            col = raw.cells[name]
            if kind == "categorical":
                table = self.tokens[name]
                vals = [table.get(col[i], 0) if col[i] is not None else 0 for i in rows]
                v = np.array(vals, dtype=DTYPE)
                v[v == 0] = np.nan
            else:
                v = np.array([np.nan if col[i] is None or _to_float(col[i]) is None else float(col[i]) for i in rows])
            out[:, j] = v
        return out

    def transform(self, raw: RawTable, rows=None) -> np.ndarray:
        rows = np.arange(len(raw)) if rows is None else np.asarray(rows, dtype=np.int64)
        z = (self._codes(raw, rows) - self.mean) / self.std
        return np.where(np.isnan(z), 0.0, z)

    def transform_codes(self, codes: np.ndarray) -> np.ndarray:
        z = (np.asarray(codes, dtype=DTYPE) - self.mean) / self.std
        return np.where(np.isnan(z), 0.0, z)

    def inverse_standardize(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=DTYPE) * self.std + self.mean

    @property
    def baseline(self) -> np.ndarray:
        return np.zeros(len(self.names))

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "kinds": list(self.kinds),
            "tokens": {k: dict(sorted(v.items())) for k, v in self.tokens.items()},
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Preprocessor":
        return cls(
            list(d["names"]), list(d["kinds"]), {k: dict(v) for k, v in d["tokens"].items()},
            np.asarray(d["mean"], dtype=DTYPE), np.asarray(d["std"], dtype=DTYPE), list(d.get("warnings", [])),
        )


@dataclass
class FeatureMatrix:
    x: np.ndarray
    y: np.ndarray


@dataclass
class Prepared:
    train: FeatureMatrix
    valid: FeatureMatrix
    test: FeatureMatrix
    preprocessor: Preprocessor
    schema: DatasetSchema
    splits: SplitSet


def fit_transform(raw: RawTable, schema: DatasetSchema, splits: SplitSet) -> Prepared:
    pre = Preprocessor.fit(raw, schema, splits.train)
    y = encode_labels(raw, schema)

    def part(rows):
        return FeatureMatrix(pre.transform(raw, rows), y[rows])

    return Prepared(part(splits.train), part(splits.valid), part(splits.test), pre, schema, splits)


@dataclass
class DatasetManifest:
    """JSON description of a dataset: file, label, hints, split fractions and seed."""

    data: str
    label: str | None = None
    task: str | None = None
    hints: dict[str, str] = field(default_factory=dict)
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0
    stratify: bool = True
    base_dir: str = ""

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        with open(path) as fh:
            d = json.load(fh)
        known = {"data", "label", "task", "hints", "fractions", "seed", "stratify"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown manifest keys {sorted(unknown)}; valid keys: {sorted(known)}")
        m = cls(**d)
        m.fractions = tuple(m.fractions)
        m.base_dir = os.path.dirname(os.path.abspath(path))
        return m

    def save(self, path) -> None:
        d = asdict(self)
        d.pop("base_dir")
        d["fractions"] = list(self.fractions)
        with open(path, "w") as fh:
            json.dump(d, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @property
    def data_path(self) -> str:
        return self.data if os.path.isabs(self.data) else os.path.join(self.base_dir, self.data)

    def prepare(self) -> Prepared:
        raw, schema = load_csv(self.data_path, self.label, self.hints, self.task)
        labels = encode_labels(raw, schema) if schema.task != "regression" else None
        splits = make_splits(len(raw), self.fractions, self.seed, labels, self.stratify and labels is not None)
        return fit_transform(raw, schema, splits)
