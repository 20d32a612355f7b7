"""Exact k-nearest-neighbour retrieval of a test-aligned training manifold.

Distances are Euclidean on standardized features. Ordering is by
(squared distance, training index), so ties always go to the lower index.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from eapo.data import DataError, Dataset, Record

# queries per distance block; bounds the (block, n) scratch matrix
_BLOCK = 256


@dataclass(frozen=True)
class PreferencePair:
    features: tuple[float, ...]
    y_plus: int
    y_minus: int

    def __post_init__(self):
        if self.y_plus not in (0, 1) or self.y_minus != 1 - self.y_plus:
            raise ValueError("preference pair needs y_minus = 1 - y_plus with labels in {0, 1}")


@dataclass(frozen=True)
class LocalManifold:
    """Deduplicated union of retrieved training records (sorted by index)."""

    data: Dataset
    source_indices: np.ndarray
    query_count: int
    k: int

    @property
    def records(self) -> list[Record]:
        # records carry their *training* index, not their position here
        return [
            Record(r.features, r.label, r.intensity, int(src))
            for r, src in zip(self.data, self.source_indices)
        ]

    def __len__(self) -> int:
        return len(self.data)


@dataclass(frozen=True)
class ExtremeSubset:
    """Label-1 members of a manifold, in manifold order."""

    data: Dataset
    source_indices: np.ndarray

    @property
    def records(self) -> list[Record]:
        return [
            Record(r.features, r.label, r.intensity, int(src))
            for r, src in zip(self.data, self.source_indices)
        ]

    @property
    def is_empty(self) -> bool:
        return len(self.data) == 0

    def __len__(self) -> int:
        return len(self.data)


def _sq_dist(x: np.ndarray, q: np.ndarray) -> np.ndarray:
    diff = x - q
    return np.einsum("ij,ij->i", diff, diff)


def _check(train: Dataset, k: int, dim: int) -> None:
    if k < 1:
        raise DataError("k must be a positive integer")
    if len(train) == 0:
        raise DataError("training set is empty")
    if dim != train.dim:
        raise DataError(f"query dimension {dim} does not match training dimension {train.dim}")


def _select(x: np.ndarray, q: np.ndarray, cand: np.ndarray, k: int) -> np.ndarray:
    d = _sq_dist(x[cand], q)
    order = np.lexsort((cand, d))
    return cand[order[:k]]


def _topk_block(x: np.ndarray, x_sq: np.ndarray, queries: np.ndarray, k: int) -> list[np.ndarray]:
    """Exact top-k for a block of queries.

    A matmul-based distance expansion proposes candidates; every candidate
    within a rounding margin of the k-th proposal is re-scored with the
    direct difference formula, so the result equals a full exact sort.
    """
    n = x.shape[0]
    if k >= n:
        everything = np.arange(n)
        return [_select(x, q, everything, n) for q in queries]
    q_sq = np.einsum("ij,ij->i", queries, queries)
    # |x|^2 - 2 q.x ranks like the squared distance (|q|^2 is constant per row)
    approx = queries @ x.T
    approx *= -2.0
    approx += x_sq
    kth = np.partition(approx, k - 1, axis=1)[:, k - 1]
    # expansion error is a few ulps of the operand magnitudes
    slack = 1e-9 * (q_sq + x_sq.max()) + 1e-12
    out = []
    for row, q in enumerate(queries):
        cand = np.flatnonzero(approx[row] <= kth[row] + slack[row])
        out.append(_select(x, q, cand, k))
    return out


def neighborhood(query, train: Dataset, k: int) -> list[int]:
    """Indices of the ``min(k, n)`` nearest training records, nearest first."""
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    _check(train, k, q.shape[0])
    x = train.features
    x_sq = np.einsum("ij,ij->i", x, x)
    return [int(i) for i in _topk_block(x, x_sq, q[None, :], k)[0]]


def build_local_manifold(test_features, train: Dataset, k: int) -> LocalManifold:
    """Set union of the k-neighbourhoods of every query, keyed by training index."""
    queries = np.asarray(test_features, dtype=np.float64)
    if queries.ndim == 1:
        queries = queries[None, :]
    if queries.shape[0] == 0:
        raise DataError("query list is empty")
    _check(train, k, queries.shape[1])
    x = train.features
    x_sq = np.einsum("ij,ij->i", x, x)
    hit = np.zeros(len(train), dtype=bool)
    for start in range(0, queries.shape[0], _BLOCK):
        for idx in _topk_block(x, x_sq, queries[start : start + _BLOCK], k):
            hit[idx] = True
    src = np.flatnonzero(hit)
    src.setflags(write=False)
    return LocalManifold(train.subset(src), src, int(queries.shape[0]), int(k))


def extract_extreme(manifold: LocalManifold) -> ExtremeSubset:
    pos = np.flatnonzero(manifold.data.labels == 1)
    src = manifold.source_indices[pos]
    if pos.size == 0:
        warnings.warn("local manifold contains no positive records; extreme subset is empty", stacklevel=2)
    return ExtremeSubset(manifold.data.subset(pos), src)


def make_preference_pairs(records: Sequence[Record]) -> list[PreferencePair]:
    return [PreferencePair(tuple(r.features), int(r.label), 1 - int(r.label)) for r in records]


def export_manifold(part, path, delimiter: str = ",") -> None:
    """Write a LocalManifold or ExtremeSubset with a ``source_index`` column."""
    from eapo.data import export_table

    export_table(part.data, path, delimiter, {"source_index": [int(i) for i in part.source_indices]})
