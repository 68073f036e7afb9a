"""Classification and token-sequence metrics with bootstrap intervals.

Conventions, documented because small test sets can hit them: classes
with zero reference support are excluded from the recall average; per-
class precision/recall/F1 use the 0-convention when a denominator is 0
(and those classes still count toward the macro means). Token error rate
is corpus-level: total edit distance over total reference length.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .rng import Rng


class ConfusionMatrix:
    """counts[reference class][predicted class]."""

    def __init__(self, counts):
        arr = np.asarray(counts)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError("confusion matrix must be square")
        if np.any(arr < 0) or not np.all(arr == np.floor(arr)):
            raise ValueError("confusion counts must be nonnegative integers")
        self.counts = arr.astype(np.int64)

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[int, int]], num_classes: int
                   ) -> "ConfusionMatrix":
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        for ref, pred in pairs:
            counts[ref, pred] += 1
        return cls(counts)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def tolist(self) -> list[list[int]]:
        return self.counts.tolist()


def uar(cm: ConfusionMatrix) -> float:
    """Mean per-class recall over classes with support."""
    support = cm.counts.sum(axis=1)
    if not np.any(support > 0):
        raise ValueError("confusion matrix has no evaluated utterances")
    mask = support > 0
    recalls = np.diag(cm.counts)[mask] / support[mask]
    return float(recalls.mean())


def _per_class_prf(cm: ConfusionMatrix) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    tp = np.diag(cm.counts).astype(np.float64)
    ref = cm.counts.sum(axis=1).astype(np.float64)
    pred = cm.counts.sum(axis=0).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(pred > 0, tp / pred, 0.0)
        recall = np.where(ref > 0, tp / ref, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    return precision, recall, f1


def precision_macro(cm: ConfusionMatrix) -> float:
    precision, _, _ = _per_class_prf(cm)
    return float(precision.mean())


def macro_f1(cm: ConfusionMatrix) -> float:
    _, _, f1 = _per_class_prf(cm)
    return float(f1.mean())


def levenshtein(a: Sequence[int], b: Sequence[int]) -> int:
    """Unit-cost edit distance, iterative two-row DP."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1,
                         prev[j - 1] + (x != y))
        prev = cur
    return prev[len(b)]


def token_error_rate(hyp: Sequence[int], ref: Sequence[int]) -> float:
    """Levenshtein(hyp, ref) / len(ref); an empty reference counts every
    hypothesis token as an error over a denominator of 1."""
    if len(ref) == 0:
        return float(len(hyp))
    return levenshtein(hyp, ref) / len(ref)


def corpus_token_error_rate(pairs: Sequence[tuple[Sequence[int], Sequence[int]]]
                            ) -> float:
    """Total errors over total reference length across (hyp, ref) pairs."""
    errors = sum(levenshtein(h, r) for h, r in pairs)
    length = sum(len(r) for _, r in pairs)
    return errors / max(1, length)


def bootstrap_ci(records: Sequence, statistic: Callable[[list], float],
                 n_resamples: int = 1000, level: float = 0.95,
                 seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap over utterance-level records. Each resample
    draws from its own derived stream, so resamples are order-independent
    and could run in parallel."""
    if len(records) == 0:
        raise ValueError("bootstrap needs at least one record")
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    root = Rng(seed).derive("bootstrap")
    n = len(records)
    stats = np.empty(n_resamples)
    for i in range(n_resamples):
        idx = root.derive(i).integers(n, n)
        stats[i] = statistic([records[j] for j in idx.tolist()])
    lo = float(np.quantile(stats, (1 - level) / 2))
    hi = float(np.quantile(stats, 1 - (1 - level) / 2))
    return lo, hi


def metric_with_ci(records: Sequence, statistic: Callable[[list], float],
                   n_resamples: int = 1000, level: float = 0.95,
                   seed: int = 0) -> dict:
    lo, hi = bootstrap_ci(records, statistic, n_resamples, level, seed)
    return {"point": float(statistic(list(records))), "ci_lo": lo, "ci_hi": hi}


def ser_report(pairs: Sequence[tuple[int, int]], num_classes: int,
               n_resamples: int = 1000, level: float = 0.95, seed: int = 0
               ) -> dict:
    """Evaluation report for (reference, predicted) class pairs: point and
    interval per metric, plus the confusion matrix."""
    pairs = list(pairs)

    def stat(fn):
        return lambda rs: fn(ConfusionMatrix.from_pairs(rs, num_classes))

    report = {
        "uar": metric_with_ci(pairs, stat(uar), n_resamples, level, seed),
        "precision": metric_with_ci(pairs, stat(precision_macro),
                                    n_resamples, level, seed),
        "macro_f1": metric_with_ci(pairs, stat(macro_f1),
                                   n_resamples, level, seed),
        "confusion": ConfusionMatrix.from_pairs(pairs, num_classes).tolist(),
    }
    return report


def asr_report(pairs: Sequence[tuple[Sequence[int], Sequence[int]]],
               n_resamples: int = 1000, level: float = 0.95, seed: int = 0
               ) -> dict:
    pairs = list(pairs)
    return {"token_error_rate": metric_with_ci(pairs, corpus_token_error_rate,
                                               n_resamples, level, seed)}
