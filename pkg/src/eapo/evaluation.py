"""Ranking and thresholded metrics, PR-based threshold choice, intensity breakdown."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


def _as_arrays(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be 0 or 1")
    return s, y


def average_ranks(s: np.ndarray) -> np.ndarray:
    """1-based ranks with tied values sharing their mean rank."""
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    # group boundaries of equal values
    starts = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    ends = np.r_[starts[1:], len(s)]
    mean_rank = (starts + 1 + ends) / 2.0
    ranks = np.empty(len(s))
    ranks[order] = np.repeat(mean_rank, ends - starts)
    return ranks


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie)."""
    s, y = _as_arrays(scores, labels)
    p = int(y.sum())
    n = len(y) - p
    if p == 0 or n == 0:
        raise ValueError("roc_auc needs at least one positive and one negative")
    u = average_ranks(s)[y == 1].sum() - p * (p + 1) / 2.0
    return float(u / (p * n))


def _f1_from_counts(tp: np.ndarray, predicted: np.ndarray, positives: int) -> np.ndarray:
    # F1 = 2TP / (2TP + FP + FN) = 2TP / (predicted + positives)
    return 2.0 * tp / (predicted + positives)


def threshold_candidates(scores) -> np.ndarray:
    """Below-min sentinel, midpoints between distinct sorted scores, above-max sentinel."""
    u = np.unique(np.asarray(scores, dtype=np.float64))
    if u.size == 0:
        raise ValueError("no scores")
    mids = (u[:-1] + u[1:]) / 2.0
    return np.r_[np.nextafter(u[0], -np.inf), mids, np.nextafter(u[-1], np.inf)]


def select_threshold_pr(scores, labels) -> float:
    """F1-maximizing threshold over the PR-curve candidates.

    Ties go to the highest threshold (fewest predicted positives).
    """
    s, y = _as_arrays(scores, labels)
    positives = int(y.sum())
    if positives == 0:
        raise ValueError("threshold selection needs at least one positive label")
    cands = threshold_candidates(s)
    # predicted positive iff score >= threshold; count via sorted scores
    s_sorted = np.sort(s)
    pos_sorted = np.sort(s[y == 1])
    predicted = len(s) - np.searchsorted(s_sorted, cands, side="left")
    tp = positives - np.searchsorted(pos_sorted, cands, side="left")
    f1 = _f1_from_counts(tp.astype(np.float64), predicted.astype(np.float64), positives)
    best = np.flatnonzero(f1 == f1.max())
    return float(cands[best[-1]])


@dataclass(frozen=True)
class EvalReport:
    threshold: float
    accuracy: float
    precision: float
    recall: float
    f1: float
    roc_auc: Optional[float]
    tp: int
    fp: int
    tn: int
    fn: int
    threshold_source: str = "train"

    @property
    def counts(self) -> tuple[int, int, int, int]:
        return self.tp, self.fp, self.tn, self.fn

    @property
    def false_positive_rate(self) -> float:
        neg = self.fp + self.tn
        return self.fp / neg if neg else 0.0

    def to_text(self) -> str:
        """Key-value report, one ``key = value`` per line, floats in repr form."""
        items = [
            ("threshold", self.threshold),
            ("threshold_source", self.threshold_source),
            ("accuracy", self.accuracy),
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
            ("roc_auc", self.roc_auc),
            ("false_positive_rate", self.false_positive_rate),
            ("tp", self.tp),
            ("fp", self.fp),
            ("tn", self.tn),
            ("fn", self.fn),
        ]
        lines = []
        for k, v in items:
            if v is None:
                v = "NA"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        kv = {}
        for line in text.splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                kv[k.strip()] = v.strip()
        auc = None if kv["roc_auc"] == "NA" else float(kv["roc_auc"])
        return cls(
            threshold=float(kv["threshold"]),
            accuracy=float(kv["accuracy"]),
            precision=float(kv["precision"]),
            recall=float(kv["recall"]),
            f1=float(kv["f1"]),
            roc_auc=auc,
            tp=int(kv["tp"]),
            fp=int(kv["fp"]),
            tn=int(kv["tn"]),
            fn=int(kv["fn"]),
            threshold_source=kv.get("threshold_source", "train"),
        )


def metrics_at_threshold(scores, labels, threshold: float, threshold_source: str = "train") -> EvalReport:
    """Confusion metrics for ``predict = score >= threshold``."""
    s, y = _as_arrays(scores, labels)
    if s.size == 0:
        raise ValueError("empty input")
    pred = s >= threshold
    pos = y == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    tn = int(np.sum(~pred & ~pos))
    fn = int(np.sum(~pred & pos))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    auc = roc_auc(s, y) if 0 < tp + fn < len(y) else None
    return EvalReport(
        threshold=float(threshold),
        accuracy=(tp + tn) / len(y),
        precision=precision,
        recall=recall,
        f1=f1,
        roc_auc=auc,
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        threshold_source=threshold_source,
    )


@dataclass(frozen=True)
class IntensityBin:
    lower: float
    upper: float
    positive_count: int
    detected_count: int

    @property
    def detection_rate(self) -> Optional[float]:
        return self.detected_count / self.positive_count if self.positive_count else None


@dataclass(frozen=True)
class IntensityBreakdown:
    bin_width: float
    bins: tuple[IntensityBin, ...] = field(default_factory=tuple)

    @property
    def bin_edges(self) -> list[float]:
        if not self.bins:
            return []
        return [b.lower for b in self.bins] + [self.bins[-1].upper]

    @property
    def total_positives(self) -> int:
        return sum(b.positive_count for b in self.bins)

    def top_nonempty(self) -> Optional[IntensityBin]:
        for b in reversed(self.bins):
            if b.positive_count:
                return b
        return None

    def to_rows(self) -> list[list[str]]:
        rows = [["log10_lower", "log10_upper", "positive_count", "detected_count", "detection_rate"]]
        for b in self.bins:
            rate = b.detection_rate
            rows.append(
                [repr(b.lower), repr(b.upper), str(b.positive_count), str(b.detected_count),
                 "" if rate is None else repr(rate)]
            )
        return rows

    def write_csv(self, path, delimiter: str = ",") -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            csv.writer(fh, delimiter=delimiter, lineterminator="\n").writerows(self.to_rows())


def intensity_breakdown(
    scores: Sequence[float],
    labels: Sequence[int],
    intensities: Sequence[Optional[float]],
    threshold: float,
    bin_width: float = 0.5,
) -> IntensityBreakdown:
    """Per-bin detection rate of positives bucketed by log10(intensity).

    Bins are half-open, ``[j*w, (j+1)*w)``, spanning the observed range;
    negatives are ignored.
    """
    if not bin_width > 0:
        raise ValueError("bin_width must be positive")
    s, y = _as_arrays(scores, labels)
    inten = np.array([np.nan if v is None else v for v in intensities], dtype=np.float64)
    if inten.shape != s.shape:
        raise ValueError("intensities differ in length from scores")
    pos = y == 1
    if np.any(pos & ~(inten > 0)):
        raise ValueError("every positive needs an intensity > 0")
    if not pos.any():
        return IntensityBreakdown(bin_width, ())

    logs = np.log10(inten[pos])
    detected = s[pos] >= threshold
    slots = np.floor(logs / bin_width).astype(np.int64)
    lo, hi = int(slots.min()), int(slots.max())
    bins = []
    for j in range(lo, hi + 1):
        in_bin = slots == j
        bins.append(
            IntensityBin(
                lower=j * bin_width,
                upper=(j + 1) * bin_width,
                positive_count=int(in_bin.sum()),
                detected_count=int((in_bin & detected).sum()),
            )
        )
    return IntensityBreakdown(bin_width, tuple(bins))
