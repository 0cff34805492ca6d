"""Classification accuracy metrics: ROC/AUC, operating points, accuracy, AP/mAP.

Conventions used throughout:

* A case is called positive when its score is >= the cutoff (inclusive: "at
  least 25% malignant neighbors" counts the boundary).
* ROC curves are exact step curves: one operating point per distinct observed
  score plus -inf/+inf sentinels, no binning.  The trapezoidal area then
  equals the tie-corrected Mann-Whitney statistic
  (#{pos > neg} + 0.5 #{pos = neg}) / (P N).
* Average precision is the step sum  AP = sum_n (R_n - R_{n-1}) P_n  over
  descending unique score thresholds, with tied scores entering together.
* Macro mAP averages one-vs-rest AP over the classes actually present in the
  test truth; absent classes are skipped and reported, not scored as zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ValidationError


@dataclass(frozen=True, eq=False)
class RocAnalysis:
    thresholds: np.ndarray      # ascending, with -inf/+inf sentinels
    sensitivity: np.ndarray     # fraction, per threshold
    specificity: np.ndarray     # fraction, per threshold
    auc: float
    positive_count: int
    negative_count: int

    def points(self):
        """(threshold, sensitivity, specificity) triples, ascending threshold."""
        return list(zip(self.thresholds, self.sensitivity, self.specificity))


@dataclass(frozen=True)
class OperatingPoint:
    cutoff: float
    sensitivity: float          # percent
    specificity: float          # percent


@dataclass(frozen=True)
class MapResult:
    """Macro mAP plus its per-class breakdown and the skipped (absent) classes."""

    value: float
    per_class: dict[str, float]
    skipped: tuple[str, ...]


def _binary_arrays(scores, truth):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    t = np.asarray(truth, dtype=bool).reshape(-1)
    if s.shape != t.shape:
        raise ValidationError(f"length mismatch: {s.shape[0]} scores, {t.shape[0]} truth")
    if s.size == 0:
        raise ValidationError("empty score vector")
    if not np.all(np.isfinite(s)):
        raise ValidationError("non-finite score")
    return s, t


def rank_auc(scores, truth) -> float:
    """Tie-corrected Mann-Whitney AUC via midranks."""
    s, t = _binary_arrays(scores, truth)
    p = int(t.sum())
    n = s.size - p
    if p == 0 or n == 0:
        raise ValidationError("single-class truth vector: AUC undefined")
    ranks = rankdata(s, method="average")
    return float((ranks[t].sum() - p * (p + 1) / 2.0) / (p * n))


def roc_auc(scores, truth) -> RocAnalysis:
    """Exact ROC step curve and its trapezoidal area."""
    s, t = _binary_arrays(scores, truth)
    p = int(t.sum())
    n = s.size - p
    if p == 0 or n == 0:
        raise ValidationError("single-class truth vector: AUC undefined")

    pos_sorted = np.sort(s[t])
    neg_sorted = np.sort(s[~t])
    thresholds = np.concatenate(([-np.inf], np.unique(s), [np.inf]))
    # predicted positive iff score >= threshold
    tp = p - np.searchsorted(pos_sorted, thresholds, side="left")
    fp = n - np.searchsorted(neg_sorted, thresholds, side="left")
    sens = tp / p
    spec = (n - fp) / n

    # integrate in FPR-increasing order (thresholds descending)
    fpr = (fp / n)[::-1]
    tpr = sens[::-1]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))

    for arr in (thresholds, sens, spec):
        arr.setflags(write=False)
    return RocAnalysis(
        thresholds=thresholds,
        sensitivity=sens,
        specificity=spec,
        auc=auc,
        positive_count=p,
        negative_count=n,
    )


def operating_point(scores, truth, cutoff: float) -> OperatingPoint:
    """Sens/spec in percent at a fixed cutoff, score >= cutoff counting positive."""
    s, t = _binary_arrays(scores, truth)
    p = int(t.sum())
    n = s.size - p
    if p == 0 or n == 0:
        raise ValidationError("single-class truth vector: operating point undefined")
    predicted = s >= cutoff
    tp = int(np.count_nonzero(predicted & t))
    tn = int(np.count_nonzero(~predicted & ~t))
    return OperatingPoint(
        cutoff=float(cutoff),
        sensitivity=100.0 * tp / p,
        specificity=100.0 * tn / n,
    )


def multiclass_accuracy(predictions: Sequence[str], truth: Sequence[str]) -> float:
    if len(predictions) != len(truth):
        raise ValidationError(
            f"length mismatch: {len(predictions)} predictions, {len(truth)} truth"
        )
    if not truth:
        raise ValidationError("empty truth vector")
    return sum(1 for a, b in zip(predictions, truth) if a == b) / len(truth)


def average_precision(scores, truth) -> float:
    """Step-interpolated AP over descending unique thresholds, ties together."""
    s, t = _binary_arrays(scores, truth)
    p = int(t.sum())
    if p == 0:
        raise ValidationError("no positives: average precision undefined")

    order = np.argsort(-s, kind="stable")
    s = s[order]
    t = t[order]
    cum_tp = np.cumsum(t)
    ranks = np.arange(1, s.size + 1)
    # last index of every tie block = one evaluation threshold
    block_end = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    precision = cum_tp[block_end] / ranks[block_end]
    recall = cum_tp[block_end] / p
    return float(np.sum(np.diff(np.concatenate(([0.0], recall))) * precision))


def mean_average_precision(
    distributions: Sequence, truth: Sequence[str], label_set: Sequence[str]
) -> MapResult:
    """Macro mean of one-vs-rest AP per class present in the truth.

    ``distributions`` yield a score per class via ``.score(cls)`` (absent
    classes score 0, which is how a model that never saw a class enters the
    comparison).  Classes in ``label_set`` but absent from the truth have no
    defined AP; they are skipped and listed in the result.
    """
    if not truth:
        raise ValidationError("empty truth vector")
    labels = tuple(label_set)
    unknown = set(truth) - set(labels)
    if unknown:
        raise ValidationError(f"truth labels outside the label set: {sorted(unknown)}")
    present = set(truth)
    per_class: dict[str, float] = {}
    skipped = tuple(c for c in labels if c not in present)
    for cls in labels:
        if cls not in present:
            continue
        scores = np.array([d.score(cls) for d in distributions], dtype=np.float64)
        flags = np.array([t == cls for t in truth], dtype=bool)
        per_class[cls] = average_precision(scores, flags)
    value = float(np.mean(list(per_class.values())))
    return MapResult(value=value, per_class=per_class, skipped=skipped)
