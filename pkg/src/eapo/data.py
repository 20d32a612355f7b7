"""Datasets, flat-file ingestion, standardization and a synthetic shift benchmark.

A :class:`Dataset` stores its records column-wise (numpy arrays) because every
downstream stage consumes whole matrices; :class:`Record` views are
materialized on demand.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np


class DataError(ValueError):
    """Raised for malformed tables, invalid configs or mismatched shapes."""


@dataclass(frozen=True)
class Record:
    features: tuple[float, ...]
    label: int
    intensity: Optional[float]
    index: int


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class Dataset:
    """Immutable labeled feature table.

    ``intensity`` uses NaN for "absent". Indices are always ``0..n-1`` in row
    order.
    """

    __slots__ = ("features", "labels", "intensity", "feature_names")

    def __init__(
        self,
        features: np.ndarray,
        labels: np.ndarray,
        intensity: Optional[np.ndarray] = None,
        feature_names: Optional[Sequence[str]] = None,
    ):
        x = np.array(features, dtype=np.float64, copy=True)
        if x.ndim != 2 or x.shape[1] == 0:
            raise DataError(f"features must be a 2-D array with >= 1 column, got shape {x.shape}")
        y = np.array(labels, dtype=np.int64, copy=True).reshape(-1)
        if y.shape[0] != x.shape[0]:
            raise DataError("features and labels differ in length")
        if not np.all(np.isfinite(x)):
            bad = int(np.argwhere(~np.isfinite(x))[0, 0])
            raise DataError(f"non-finite feature value in record {bad}")
        if np.any((y != 0) & (y != 1)):
            raise DataError("labels must be 0 or 1")
        if intensity is None:
            inten = np.full(x.shape[0], np.nan)
        else:
            inten = np.array(intensity, dtype=np.float64, copy=True).reshape(-1)
            if inten.shape[0] != x.shape[0]:
                raise DataError("intensity and labels differ in length")
            # a zero intensity on a negative is the same as absent
            inten[(y == 0) & (inten == 0)] = np.nan
            present = ~np.isnan(inten)
            if np.any(present & (y == 0)):
                raise DataError("negative records cannot carry a nonzero intensity")
            if np.any(present & ~(inten > 0)) or np.any(np.isinf(inten)):
                raise DataError("positive intensities must be finite and > 0")
        if feature_names is None:
            names = tuple(f"x{i}" for i in range(x.shape[1]))
        else:
            names = tuple(feature_names)
            if len(names) != x.shape[1]:
                raise DataError("feature_names length does not match feature columns")
        object.__setattr__(self, "features", _readonly(x))
        object.__setattr__(self, "labels", _readonly(y))
        object.__setattr__(self, "intensity", _readonly(inten))
        object.__setattr__(self, "feature_names", names)

    def __setattr__(self, name, value):
        raise AttributeError("Dataset is immutable")

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def positive_count(self) -> int:
        return int(self.labels.sum())

    def __len__(self) -> int:
        return self.features.shape[0]

    def __getitem__(self, i: int) -> Record:
        inten = self.intensity[i]
        return Record(
            features=tuple(float(v) for v in self.features[i]),
            label=int(self.labels[i]),
            intensity=None if math.isnan(inten) else float(inten),
            index=int(i) if i >= 0 else len(self) + int(i),
        )

    def __iter__(self) -> Iterator[Record]:
        return (self[i] for i in range(len(self)))

    @property
    def records(self) -> list[Record]:
        return list(self)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.features.shape == other.features.shape
            and self.feature_names == other.feature_names
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.intensity, other.intensity, equal_nan=True)
        )

    __hash__ = None

    def __repr__(self) -> str:
        return f"Dataset(n={len(self)}, dim={self.dim}, positives={self.positive_count})"

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.intensity[idx], self.feature_names)

    def with_features(self, features: np.ndarray) -> "Dataset":
        return Dataset(features, self.labels, self.intensity, self.feature_names)


# ---------------------------------------------------------------------------
# flat-file I/O


@dataclass(frozen=True)
class Schema:
    """Maps header names to column roles.

    Exactly one of ``label_column`` / ``dm_column`` must be given. With a DM
    column, label = 1 iff DM > 0 and the DM value becomes the intensity.
    ``intensity_column`` is only meaningful alongside ``label_column``.
    """

    features: tuple[str, ...]
    label_column: Optional[str] = None
    dm_column: Optional[str] = None
    intensity_column: Optional[str] = None
    delimiter: str = ","

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        if not self.features:
            raise DataError("schema needs at least one feature column")
        if (self.label_column is None) == (self.dm_column is None):
            raise DataError("schema must name exactly one of label_column / dm_column")
        if self.intensity_column is not None and self.dm_column is not None:
            raise DataError("intensity_column cannot be combined with dm_column")

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        return cls(
            features=tuple(d["features"]),
            label_column=d.get("label_column"),
            dm_column=d.get("dm_column"),
            intensity_column=d.get("intensity_column"),
            delimiter=d.get("delimiter", ","),
        )


EXPORT_LABEL = "label"
EXPORT_INTENSITY = "intensity"


def export_schema(ds: Dataset, delimiter: str = ",") -> Schema:
    """Schema that re-reads a table written by :func:`export_table`."""
    return Schema(
        features=ds.feature_names,
        label_column=EXPORT_LABEL,
        intensity_column=EXPORT_INTENSITY,
        delimiter=delimiter,
    )


def _parse_float(cell: str, row: int, col: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise DataError(f"row {row}: column {col!r} is not numeric: {cell!r}") from None
    if not math.isfinite(v):
        raise DataError(f"row {row}: column {col!r} is not finite: {cell!r}")
    return v


def load_table(path, schema: Schema) -> Dataset:
    """Read a delimited text table with a header row.

    Row numbers in error messages count data rows from 1 (the header is
    row 0).
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file (no header)") from None
        pos = {name: i for i, name in enumerate(header)}
        wanted = list(schema.features) + [
            c for c in (schema.label_column, schema.dm_column, schema.intensity_column) if c
        ]
        missing = [c for c in wanted if c not in pos]
        if missing:
            raise DataError(f"{path}: header lacks columns {missing}")
        feat_pos = [pos[c] for c in schema.features]

        xs, ys, its = [], [], []
        for rownum, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"row {rownum}: expected {len(header)} fields, got {len(row)}")
            xs.append([_parse_float(row[p], rownum, c) for p, c in zip(feat_pos, schema.features)])
            if schema.dm_column is not None:
                dm = _parse_float(row[pos[schema.dm_column]], rownum, schema.dm_column)
                if dm < 0:
                    raise DataError(f"row {rownum}: negative DM value {dm}")
                ys.append(1 if dm > 0 else 0)
                its.append(dm if dm > 0 else math.nan)
            else:
                raw = row[pos[schema.label_column]].strip()
                if raw not in ("0", "1"):
                    raise DataError(f"row {rownum}: label must be 0 or 1, got {raw!r}")
                ys.append(int(raw))
                inten = math.nan
                if schema.intensity_column is not None:
                    cell = row[pos[schema.intensity_column]].strip()
                    if cell:
                        inten = _parse_float(cell, rownum, schema.intensity_column)
                        if ys[-1] == 1 and inten <= 0:
                            raise DataError(f"row {rownum}: positive record with intensity {inten} <= 0")
                        if ys[-1] == 0 and inten != 0:
                            raise DataError(f"row {rownum}: negative record with intensity {inten}")
                        if inten == 0:
                            inten = math.nan
                its.append(inten)

    x = np.array(xs, dtype=np.float64).reshape(len(xs), len(schema.features))
    return Dataset(x, np.array(ys, dtype=np.int64), np.array(its, dtype=np.float64), schema.features)


def export_table(
    ds: Dataset,
    path,
    delimiter: str = ",",
    extra_columns: Optional[dict[str, Sequence]] = None,
) -> None:
    """Write ``ds`` in the loader's format (features, label, intensity).

    Floats are written with ``repr`` so a reload is bit-exact. Extra columns
    (e.g. ``source_index``) are appended and ignored by :func:`export_schema`.
    """
    extra_columns = extra_columns or {}
    header = list(ds.feature_names) + [EXPORT_LABEL, EXPORT_INTENSITY] + list(extra_columns)
    extras = [list(v) for v in extra_columns.values()]
    for col in extras:
        if len(col) != len(ds):
            raise DataError("extra column length does not match dataset")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(header)
        for i in range(len(ds)):
            inten = ds.intensity[i]
            row = [repr(float(v)) for v in ds.features[i]]
            row.append(str(int(ds.labels[i])))
            row.append("" if math.isnan(inten) else repr(float(inten)))
            row.extend(str(col[i]) for col in extras)
            w.writerow(row)


# ---------------------------------------------------------------------------
# standardization


@dataclass(frozen=True)
class Standardizer:
    means: np.ndarray
    stds: np.ndarray
    constant_mask: np.ndarray = field(init=False)

    def __post_init__(self):
        means = _readonly(np.array(self.means, dtype=np.float64))
        stds = _readonly(np.array(self.stds, dtype=np.float64))
        if means.shape != stds.shape or means.ndim != 1:
            raise DataError("means and stds must be equal-length vectors")
        if np.any(stds < 0):
            raise DataError("stds must be nonnegative")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "stds", stds)
        object.__setattr__(self, "constant_mask", _readonly(stds == 0))

    @property
    def dim(self) -> int:
        return self.means.shape[0]

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise DataError(f"dimension mismatch: standardizer has {self.dim}, input has {x.shape[-1]}")
        safe = np.where(self.constant_mask, 1.0, self.stds)
        return np.where(self.constant_mask, 0.0, (x - self.means) / safe)

    def to_dict(self) -> dict:
        return {"means": [float(v) for v in self.means], "stds": [float(v) for v in self.stds]}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.array(d["means"], dtype=np.float64), np.array(d["stds"], dtype=np.float64))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Standardizer):
            return NotImplemented
        return np.array_equal(self.means, other.means) and np.array_equal(self.stds, other.stds)

    __hash__ = None


def fit_standardizer(train: Dataset) -> Standardizer:
    """Per-feature population mean and standard deviation."""
    if len(train) == 0:
        raise DataError("cannot fit a standardizer on an empty dataset")
    return Standardizer(train.features.mean(axis=0), train.features.std(axis=0, ddof=0))


def apply_standardizer(s: Standardizer, ds: Dataset) -> Dataset:
    if ds.dim != s.dim:
        raise DataError(f"dimension mismatch: standardizer has {s.dim}, dataset has {ds.dim}")
    return ds.with_features(s.transform(ds.features))


# ---------------------------------------------------------------------------
# synthetic covariate-shift benchmark


@dataclass(frozen=True)
class SyntheticConfig:
    """Two isotropic Gaussian classes; test inputs translated by a fixed vector.

    ``intensity_margin_weight`` couples a positive's log-intensity to how far
    it sits past the positive-class mean along the separation axis (0 makes
    intensity independent of the features).
    """

    dim: int = 12
    n_train: int = 20000
    n_test: int = 5000
    positive_rate: float = 0.05
    shift_magnitude: float = 2.0
    class_separation: float = 2.5
    intensity_log_mean: float = 18.4
    intensity_log_std: float = 1.0
    intensity_margin_weight: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.dim < 1 or self.n_train < 1 or self.n_test < 1:
            raise DataError("dim, n_train and n_test must be positive")
        if not 0.0 < self.positive_rate < 1.0:
            raise DataError("positive_rate must lie strictly between 0 and 1")
        if self.shift_magnitude < 0:
            raise DataError("shift_magnitude must be nonnegative")
        if self.class_separation <= 0:
            raise DataError("class_separation must be positive")
        if self.intensity_log_std < 0:
            raise DataError("intensity_log_std must be nonnegative")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def generate_synthetic(cfg: SyntheticConfig) -> tuple[Dataset, Dataset]:
    """Seeded (train, test) pair with a pure mean translation on test inputs.

    The random stream never depends on ``shift_magnitude``, so two configs
    differing only in shift produce test features that differ by one constant
    vector.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    class_axis = _unit(rng.standard_normal(cfg.dim))
    shift_axis = _unit(rng.standard_normal(cfg.dim))

    def draw(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        y = (rng.random(n) < cfg.positive_rate).astype(np.int64)
        x = rng.standard_normal((n, cfg.dim))
        x += np.outer(y, class_axis * cfg.class_separation)
        excess = x @ class_axis - cfg.class_separation
        log_i = (
            cfg.intensity_log_mean
            + cfg.intensity_margin_weight * excess
            + cfg.intensity_log_std * rng.standard_normal(n)
        )
        inten = np.where(y == 1, np.exp(log_i), np.nan)
        return x, y, inten

    x_tr, y_tr, i_tr = draw(cfg.n_train)
    x_te, y_te, i_te = draw(cfg.n_test)
    x_te = x_te + cfg.shift_magnitude * shift_axis
    return Dataset(x_tr, y_tr, i_tr), Dataset(x_te, y_te, i_te)
