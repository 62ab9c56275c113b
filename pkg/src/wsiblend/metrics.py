"""ROC/AUC, thresholded confusion matrices and the Wilcoxon signed-rank test.

Prediction tables are comma-separated text with a header row::

    patch_id,air,dust,tissue,ink,marker,focus,label

one score column per artifact class (values in [0, 1]) and a ``label``
column holding the true class name or ``background``.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .annotations import CLASS_ORDER, ArtifactClass
from .errors import (
    AllZeroDifferences,
    LengthMismatch,
    MalformedTable,
    SingleClassInput,
    TooFewPairs,
)

BACKGROUND = "background"
CONFUSION_LABELS = [c.value for c in CLASS_ORDER] + [BACKGROUND]
EXACT_MAX_N = 20


@dataclass
class PredictionTable:
    patch_ids: list[str]
    scores: np.ndarray  # (n_rows, 6), columns in CLASS_ORDER
    truth: list[Optional[ArtifactClass]]  # None = background

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        n = len(self.patch_ids)
        if n < 1:
            raise MalformedTable("prediction table has no rows")
        if self.scores.shape != (n, len(CLASS_ORDER)) or len(self.truth) != n:
            raise MalformedTable(f"inconsistent table shapes: scores {self.scores.shape}, {n} ids, {len(self.truth)} labels")
        if not np.all(np.isfinite(self.scores)) or self.scores.min() < 0 or self.scores.max() > 1:
            raise MalformedTable("scores must be finite values in [0, 1]")
        if len(set(self.patch_ids)) != n:
            raise MalformedTable("patch_ids must be unique")

    def __len__(self):
        return len(self.patch_ids)

    def indicators(self) -> np.ndarray:
        """(n_rows, 6) one-vs-rest truth matrix."""
        out = np.zeros(self.scores.shape, dtype=np.int64)
        for i, t in enumerate(self.truth):
            if t is not None:
                out[i, t.index] = 1
        return out


def read_predictions(path: os.PathLike | str) -> PredictionTable:
    ids, scores, truth = [], [], []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        cols = [c.value for c in CLASS_ORDER]
        missing = [c for c in ["patch_id", *cols, "label"] if c not in (reader.fieldnames or [])]
        if missing:
            raise MalformedTable(f"{path}: missing columns {missing}")
        for row in reader:
            ids.append(row["patch_id"])
            try:
                scores.append([float(row[c]) for c in cols])
            except ValueError as e:
                raise MalformedTable(f"{path}: bad score in row {row['patch_id']!r}: {e}") from e
            label = row["label"].strip()
            truth.append(None if label.lower() == BACKGROUND else ArtifactClass.parse(label))
    return PredictionTable(ids, np.array(scores).reshape(-1, len(CLASS_ORDER)), truth)


def write_predictions(table: PredictionTable, path: os.PathLike | str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["patch_id", *[c.value for c in CLASS_ORDER], "label"])
        for pid, s, t in zip(table.patch_ids, table.scores, table.truth):
            w.writerow([pid, *[repr(float(v)) for v in s], BACKGROUND if t is None else t.value])


# ---------------------------------------------------------------------------
# ROC


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> RocCurve:
    """ROC points at every distinct threshold and trapezoidal AUC.

    Tied scores move the curve diagonally, which gives tied pairs half
    credit: the AUC equals the Mann-Whitney U statistic over n1 * n0.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise LengthMismatch(f"{s.size} scores vs {y.size} labels")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise SingleClassInput("ROC needs at least one positive and one negative")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]  # last index of each distinct score
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thresholds = np.r_[np.inf, s[last]]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, thresholds, auc)


def per_class_report(table: PredictionTable) -> dict[str, Optional[float]]:
    """One-vs-rest AUC per class plus the micro-averaged ``all`` entry; ``None`` marks a class that cannot be scored."""
    y = table.indicators()
    out: dict[str, Optional[float]] = {}
    for c in CLASS_ORDER:
        col = y[:, c.index]
        if col.min() == col.max():
            out[c.value] = None
        else:
            out[c.value] = roc_auc(table.scores[:, c.index], col).auc
    flat_y = y.ravel()
    out["all"] = None if flat_y.min() == flat_y.max() else roc_auc(table.scores.ravel(), flat_y).auc
    return out


def confusion_with_threshold(table: PredictionTable, threshold: float = 0.5) -> np.ndarray:
    """7x7 counts ``[true][predicted]``; rows/cols follow CONFUSION_LABELS.

    The prediction is the highest-scoring class (first in class order on
    ties), or background when no score reaches ``threshold``.
    """
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    k = len(CLASS_ORDER)
    cm = np.zeros((k + 1, k + 1), dtype=np.int64)
    best = np.argmax(table.scores, axis=1)
    top = table.scores[np.arange(len(table)), best]
    pred = np.where(top >= threshold, best, k)
    for t, p in zip(table.truth, pred):
        cm[k if t is None else t.index, p] += 1
    return cm


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank


@dataclass
class WilcoxonResult:
    statistic: float  # min(W+, W-)
    pvalue: float
    n: int  # pairs left after dropping zero differences
    w_plus: float
    w_minus: float
    method: str


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    sorted_v = values[order]
    ranks = np.empty(values.size, dtype=np.float64)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_p(ranks: np.ndarray, w: float) -> float:
    """P(W+ <= w) * 2 under H0, enumerating all sign patterns via the rank-sum distribution."""
    doubled = np.rint(2 * ranks).astype(np.int64)  # average ranks are multiples of 1/2
    total = int(doubled.sum())
    dist = np.zeros(total + 1, dtype=np.float64)
    dist[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(dist)
        shifted[r:] = dist[:total + 1 - r]
        dist = dist + shifted
    dist /= 2.0 ** ranks.size
    cutoff = int(round(2 * w))
    return min(1.0, 2.0 * float(dist[:cutoff + 1].sum()))


def _approx_p(ranks: np.ndarray, w: float) -> float:
    n = ranks.size
    mu = n * (n + 1) / 4.0
    _, counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(counts ** 3 - counts)) / 48.0
    if var <= 0:
        return 1.0
    z = (w - mu + 0.5) / math.sqrt(var)
    return min(1.0, math.erfc(-z / math.sqrt(2.0)))  # 2 * Phi(z)


def wilcoxon_signed_rank(paired_a: Sequence[float], paired_b: Sequence[float], method: str = "auto") -> WilcoxonResult:
    """Two-sided signed-rank test on ``a - b``; zero differences are dropped.

    ``method`` is ``"exact"``, ``"approx"`` (normal, tie-corrected variance,
    continuity correction) or ``"auto"`` (exact up to 20 pairs).
    """
    a = np.asarray(paired_a, dtype=np.float64)
    b = np.asarray(paired_b, dtype=np.float64)
    if a.shape != b.shape:
        raise LengthMismatch(f"paired samples differ in length: {a.size} vs {b.size}")
    d = a - b
    d = d[d != 0]
    if d.size == 0:
        raise AllZeroDifferences("all paired differences are zero")
    if d.size < 5:
        raise TooFewPairs(f"need >= 5 non-zero differences, got {d.size}")
    ranks = _average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if method == "auto":
        method = "exact" if d.size <= EXACT_MAX_N else "approx"
    if method == "exact":
        p = _exact_p(ranks, w)
    elif method == "approx":
        p = _approx_p(ranks, w)
    else:
        raise ValueError(f"unknown method {method!r}")
    return WilcoxonResult(w, p, int(d.size), w_plus, w_minus, method)


def paired_errors(a: PredictionTable, b: PredictionTable, cls: Optional[ArtifactClass] = None):
    """Per-(patch, class) absolute errors |score - truth| of two models on the same patches.

    With ``cls`` only that class's column is used; otherwise every class is pooled.
    """
    if sorted(a.patch_ids) != sorted(b.patch_ids):
        raise LengthMismatch(
            f"prediction tables cover different patches ({len(a)} vs {len(b)} rows)"
        )
    pos = {pid: i for i, pid in enumerate(b.patch_ids)}
    order = np.array([pos[pid] for pid in a.patch_ids])
    ya = a.indicators()
    ea = np.abs(a.scores - ya)
    eb = np.abs(b.scores[order] - ya)
    if cls is not None:
        return ea[:, cls.index], eb[:, cls.index]
    return ea.ravel(), eb.ravel()


def compare_models(a: PredictionTable, b: PredictionTable, mode: str = "pooled") -> dict[str, WilcoxonResult | str]:
    """Wilcoxon tests between two models: one pooled test, or one per class.

    In per-class mode a class that cannot be tested maps to the error text
    instead of a result; the pooled test raises.
    """
    if mode == "pooled":
        return {"all": wilcoxon_signed_rank(*paired_errors(a, b))}
    if mode == "per_class":
        out: dict[str, WilcoxonResult | str] = {}
        for c in CLASS_ORDER:
            try:
                out[c.value] = wilcoxon_signed_rank(*paired_errors(a, b, c))
            except (AllZeroDifferences, TooFewPairs) as e:
                out[c.value] = f"{type(e).__name__}: {e}"
        return out
    raise ValueError(f"unknown compare mode {mode!r}")
