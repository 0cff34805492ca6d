"""Turn retrieval results and softmax rows into diagnoses and malignancy scores.

The retrieval-based class probability of a query is the plain frequency of
each label among its k nearest neighbors (4 of 5 neighbors melanoma -> 0.8).
Neighbors are unweighted everywhere except top-1 prediction, where a minimal
linear rank weighting (1.00 down to 0.99, spread evenly over the k ranks)
breaks frequency ties in favor of the more similar neighbors.  That weighting
is evaluated in exact integer arithmetic so tie handling never depends on
float rounding; residual exact ties fall back to lexicographic order.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Mapping

from .datasets import Dataset
from .errors import ValidationError
from .index import RetrievalResult

# default split of diagnosis labels into malignant vs benign; configuration,
# not code: callers may pass any non-empty subset of their label set instead
DEFAULT_MALIGNANT = frozenset({"mel", "bcc", "scc"})


@dataclass(frozen=True)
class ClassDistribution:
    """Class scores in [0, 1] with their provenance ('cbir' carries its k)."""

    scores: Mapping[str, float]
    provenance: str
    k: int | None = None

    def score(self, cls: str) -> float:
        return float(self.scores.get(cls, 0.0))


def malignant_set(labels, label_set) -> frozenset[str]:
    """Validate a malignant label subset against a dataset's label set."""
    m = frozenset(labels)
    if not m:
        raise ValidationError("malignant set must not be empty")
    unknown = m - set(label_set)
    if unknown:
        raise ValidationError(
            f"malignant set contains labels outside the label set: {sorted(unknown)}"
        )
    return m


def default_malignant_set(label_set) -> frozenset[str]:
    return malignant_set(DEFAULT_MALIGNANT & set(label_set), label_set)


def _neighbor_labels(result: RetrievalResult, labels: Mapping[str, str]) -> list[str]:
    out = []
    for nid in result.ids:
        try:
            out.append(labels[nid])
        except KeyError:
            raise ValidationError(f"unresolvable neighbor id '{nid}'") from None
    return out


def cbir_distribution(result: RetrievalResult, labels: Mapping[str, str]) -> ClassDistribution:
    """score(c) = (neighbors labeled c) / k."""
    seen = _neighbor_labels(result, labels)
    k = len(seen)
    counts = Counter(seen)
    return ClassDistribution(
        scores={cls: counts[cls] / k for cls in counts},
        provenance="cbir",
        k=k,
    )


def cbir_top1(result: RetrievalResult, labels: Mapping[str, str]) -> str:
    """Most frequent neighbor label, rank-weighted only to break ties.

    Rank i (0-based, most similar first) carries weight 1 - 0.01*i/(k-1);
    scaled by 100*(k-1) this is the integer 100*(k-1) - i, so the per-class
    sum 100*(k-1)*count - sum_of_ranks ranks classes identically to the float
    weights but with exact arithmetic.  A full-count lead can never be
    overturned for k <= 200.  Exact integer ties break lexicographically.
    """
    seen = _neighbor_labels(result, labels)
    k = len(seen)
    if k == 1:
        return seen[0]
    scores: dict[str, int] = {}
    for rank, cls in enumerate(seen):
        scores[cls] = scores.get(cls, 0) + (100 * (k - 1) - rank)
    best = max(scores.values())
    return min(cls for cls, s in scores.items() if s == best)


def cbir_malignancy(result: RetrievalResult, labels: Mapping[str, str], malignant) -> float:
    """Fraction of the k neighbors carrying a malignant label (unweighted)."""
    seen = _neighbor_labels(result, labels)
    m = frozenset(malignant)
    return sum(1 for cls in seen if cls in m) / len(seen)


def softmax_distribution(row, classes) -> ClassDistribution:
    return ClassDistribution(
        scores={cls: float(p) for cls, p in zip(classes, row)},
        provenance="softmax",
    )


def softmax_top1(row, classes) -> str:
    """Argmax class of a probability row; exact ties break lexicographically."""
    best = max(float(p) for p in row)
    return min(cls for cls, p in zip(classes, row) if float(p) == best)


def softmax_malignancy(row, classes, malignant) -> float:
    """Summed probability of the malignant classes."""
    m = frozenset(malignant)
    return float(sum(float(p) for cls, p in zip(classes, row) if cls in m))
