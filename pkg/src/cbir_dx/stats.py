"""Inferential statistics for paired classifier comparison.

Implements the exact recipes the evaluation relies on:

* DeLong comparison of two correlated ROC AUCs.  Placement values
  V10(p) = mean_n psi(s_p, s_n) and V01(n) = mean_p psi(s_p, s_n), with
  psi = 1 / 0.5 / 0 for pos > / = / < neg, give AUC = mean(V10) = mean(V01);
  the variance of the AUC difference comes from the 2x2 empirical covariance
  of the placements, S10/P + S01/N, and z = dAUC / sqrt(var) is referred to
  the standard normal, two-sided.
* Stratified percentile bootstrap: positives and negatives resampled
  independently with replacement at their original sizes, 2.5/97.5 percentile
  interval over the replicate metric values.  Replicate RNG streams are
  derived from (master seed, replicate index, attempt), so results never
  depend on execution schedule.
* Paired t test, and a Wilcoxon signed-rank test with the exact (tie-aware)
  null distribution for n <= 25 and a tie- and continuity-corrected normal
  approximation above.
* A Jarque-Bera normality gate choosing between the two paired tests.
* Holm step-down adjustment with the early-stop bookkeeping: once the first
  sorted hypothesis fails rejection at alpha, the remaining ones are flagged
  as not evaluated.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import chdtrc, ndtr, stdtr
from scipy.stats import rankdata

from .errors import ValidationError

HOLM_ALPHA = 0.05


@dataclass(frozen=True)
class AucComparison:
    auc_a: float
    auc_b: float
    var_a: float
    var_b: float
    var_diff: float
    z: float
    p_value: float


@dataclass(frozen=True)
class ConfidenceInterval:
    point: float
    low: float
    high: float
    replicates: int
    level: float = 0.95


@dataclass(frozen=True)
class PairedTestResult:
    statistic: float
    p_value: float
    test: str               # "t" or "wilcoxon"
    n: int


def _placements(scores: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Placement values (V10 over positives, V01 over negatives) via midranks."""
    p = int(truth.sum())
    n = truth.size - p
    rank_all = rankdata(scores, method="average")
    rank_pos = rankdata(scores[truth], method="average")
    rank_neg = rankdata(scores[~truth], method="average")
    v10 = (rank_all[truth] - rank_pos) / n
    v01 = 1.0 - (rank_all[~truth] - rank_neg) / p
    return v10, v01


def delong_auc(scores, truth) -> float:
    """AUC as the mean placement value (equals the Mann-Whitney statistic)."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    t = np.asarray(truth, dtype=bool).reshape(-1)
    if not t.any() or t.all():
        raise ValidationError("degenerate truth vector: AUC undefined")
    v10, _ = _placements(s, t)
    return float(v10.mean())


def delong_compare(scores_a, scores_b, truth) -> AucComparison:
    """DeLong test for two correlated ROC curves sharing one truth vector."""
    a = np.asarray(scores_a, dtype=np.float64).reshape(-1)
    b = np.asarray(scores_b, dtype=np.float64).reshape(-1)
    t = np.asarray(truth, dtype=bool).reshape(-1)
    if a.shape != t.shape or b.shape != t.shape:
        raise ValidationError("score vectors and truth differ in length")
    p = int(t.sum())
    n = t.size - p
    if p < 2 or n < 2:
        raise ValidationError(
            f"degenerate truth: need >= 2 positives and >= 2 negatives, got {p}/{n}"
        )

    v10_a, v01_a = _placements(a, t)
    v10_b, v01_b = _placements(b, t)
    auc_a = float(v10_a.mean())
    auc_b = float(v10_b.mean())

    s10 = np.cov(np.stack([v10_a, v10_b]), ddof=1)
    s01 = np.cov(np.stack([v01_a, v01_b]), ddof=1)
    var_a = float(s10[0, 0] / p + s01[0, 0] / n)
    var_b = float(s10[1, 1] / p + s01[1, 1] / n)
    var_diff = float(
        (s10[0, 0] + s10[1, 1] - 2.0 * s10[0, 1]) / p
        + (s01[0, 0] + s01[1, 1] - 2.0 * s01[0, 1]) / n
    )

    if var_diff <= 0.0:
        if auc_a == auc_b:
            return AucComparison(auc_a, auc_b, var_a, var_b, max(var_diff, 0.0), 0.0, 1.0)
        raise ValidationError(
            "zero variance of the AUC difference with unequal AUCs: "
            "DeLong z undefined"
        )
    z = (auc_a - auc_b) / float(np.sqrt(var_diff))
    p_value = float(2.0 * (1.0 - ndtr(abs(z))))
    return AucComparison(auc_a, auc_b, var_a, var_b, var_diff, float(z), p_value)


class UndefinedMetric(ValueError):
    """Raised by a bootstrap metric when a replicate leaves it undefined."""


def bootstrap_ci(
    metric: Callable[[np.ndarray], float],
    strata: tuple[Sequence[int], Sequence[int]],
    replicates: int = 2000,
    seed: int = 0,
    level: float = 0.95,
) -> ConfidenceInterval:
    """Stratified percentile bootstrap of ``metric`` over resampled indices.

    ``strata`` are two non-empty index arrays (positives, negatives); each is
    resampled with replacement at its original size and the concatenation is
    passed to ``metric``.  A replicate where the metric raises UndefinedMetric
    or returns NaN is redrawn from a fresh substream (at most 10 attempts).
    """
    pos = np.asarray(strata[0], dtype=np.intp).reshape(-1)
    neg = np.asarray(strata[1], dtype=np.intp).reshape(-1)
    if pos.size == 0 or neg.size == 0:
        raise ValidationError("bootstrap stratum is empty")
    if replicates < 1:
        raise ValidationError(f"replicates must be >= 1, got {replicates}")

    point = float(metric(np.concatenate([pos, neg])))
    values = np.empty(replicates, dtype=np.float64)
    for rep in range(replicates):
        for attempt in range(10):
            rng = np.random.default_rng(np.random.SeedSequence((seed, rep, attempt)))
            idx = np.concatenate(
                [
                    pos[rng.integers(0, pos.size, size=pos.size)],
                    neg[rng.integers(0, neg.size, size=neg.size)],
                ]
            )
            try:
                value = float(metric(idx))
            except UndefinedMetric:
                continue
            if np.isnan(value):
                continue
            values[rep] = value
            break
        else:
            raise ValidationError(
                f"bootstrap replicate {rep}: metric undefined after 10 redraws"
            )

    alpha = 1.0 - level
    low, high = np.quantile(values, [alpha / 2.0, 1.0 - alpha / 2.0])
    return ConfidenceInterval(
        point=point, low=float(low), high=float(high),
        replicates=replicates, level=level,
    )


def paired_t(diffs) -> PairedTestResult:
    """Two-sided one-sample t test of the paired differences against zero."""
    d = np.asarray(diffs, dtype=np.float64).reshape(-1)
    n = d.size
    if n < 2:
        raise ValidationError(f"paired t test needs n >= 2, got {n}")
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        raise ValidationError("degenerate: zero variance of differences")
    t = float(d.mean() / (sd / np.sqrt(n)))
    p = float(2.0 * (1.0 - stdtr(n - 1, abs(t))))
    return PairedTestResult(statistic=t, p_value=p, test="t", n=n)


def _doubled_ranks(nonzero: np.ndarray) -> np.ndarray:
    """Average ranks of |diffs| times two: exact integers even with ties."""
    doubled = 2.0 * rankdata(np.abs(nonzero), method="average")
    as_int = np.rint(doubled).astype(np.int64)
    assert np.allclose(doubled, as_int)
    return as_int


def _exact_tail_counts(doubled_ranks: np.ndarray, w2: int) -> tuple[int, int, int]:
    """(#patterns with W2 <= w2, #patterns with W2 >= w2, total) by convolution.

    Counts the coefficient array of prod_i (1 + x^{r_i}) over the doubled
    ranks; equivalent to enumerating all 2^n sign patterns.
    """
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: counts.size - r]
        counts = counts + shifted
    count_le = int(counts[: w2 + 1].sum())
    count_ge = int(counts[w2:].sum())
    return count_le, count_ge, int(2 ** doubled_ranks.size)


def wilcoxon_signed_rank(diffs, exact_cutoff: int = 25) -> PairedTestResult:
    """Two-sided Wilcoxon signed-rank test on paired differences.

    Zero differences are dropped; tied magnitudes share average ranks.  The
    null distribution is exact (full sign-pattern count, conditional on the
    observed ranks) for n <= ``exact_cutoff``; beyond that a normal
    approximation with mean sum(r)/2 and variance sum(r^2)/4 -- which absorbs
    the usual tie correction -- plus a 0.5 continuity correction is used.
    """
    d = np.asarray(diffs, dtype=np.float64).reshape(-1)
    nonzero = d[d != 0.0]
    n = nonzero.size
    if n == 0:
        raise ValidationError("all differences are zero: signed-rank test undefined")

    doubled = _doubled_ranks(nonzero)
    w_plus = float(doubled[nonzero > 0].sum() / 2.0)
    w2 = int(doubled[nonzero > 0].sum())

    if n <= exact_cutoff:
        count_le, count_ge, total = _exact_tail_counts(doubled, w2)
        p = min(1.0, 2.0 * min(count_le, count_ge) / total)
    else:
        mean2 = doubled.sum() / 2.0                      # E[W2], W2 = 2 W+
        sd2 = float(np.sqrt((doubled.astype(np.float64) ** 2).sum() / 4.0))
        # continuity correction: 0.5 on the W+ scale is 1.0 on the doubled
        # scale; shrink toward the center without crossing it
        offset = max(abs(w2 - mean2) - 1.0, 0.0)
        z = offset / sd2
        p = float(2.0 * (1.0 - ndtr(z)))
    return PairedTestResult(statistic=w_plus, p_value=p, test="wilcoxon", n=n)


def normality_gate(diffs, alpha: float = 0.05) -> str:
    """Choose 't' vs 'wilcoxon' by a Jarque-Bera check of the differences.

    JB = n/6 (S^2 + K^2/4) with sample skewness S and excess kurtosis K,
    referred to chi-square(2).  Small samples (n < 8) cannot support the
    check and default to the rank test with a warning.
    """
    d = np.asarray(diffs, dtype=np.float64).reshape(-1)
    n = d.size
    if n < 8:
        warnings.warn(
            f"normality check unreliable for n={n} < 8; defaulting to wilcoxon",
            stacklevel=2,
        )
        return "wilcoxon"
    centered = d - d.mean()
    m2 = float(np.mean(centered**2))
    if m2 == 0.0:
        return "wilcoxon"
    skew = float(np.mean(centered**3)) / m2**1.5
    kurt = float(np.mean(centered**4)) / m2**2 - 3.0
    jb = n / 6.0 * (skew**2 + kurt**2 / 4.0)
    p = float(chdtrc(2, jb))
    return "wilcoxon" if p < alpha else "t"


def paired_test(diffs) -> PairedTestResult:
    """Gate on normality, then run the selected paired location test."""
    which = normality_gate(diffs)
    return paired_t(diffs) if which == "t" else wilcoxon_signed_rank(diffs)


def _check_pvalues(pvalues) -> np.ndarray:
    p = np.asarray(pvalues, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise ValidationError("empty p-value vector")
    if np.any(p < 0.0) or np.any(p > 1.0) or not np.all(np.isfinite(p)):
        raise ValidationError("p-values must lie in [0, 1]")
    return p


def holm_adjust(pvalues) -> np.ndarray:
    """Holm step-down adjusted p-values, returned in the input order.

    Sorted ascending, adj_(i) = max_{j<=i} min(1, (m-j+1) p_(j)).
    """
    p = _check_pvalues(pvalues)
    m = p.size
    order = np.argsort(p, kind="stable")
    stepped = p[order] * (m - np.arange(m))
    adjusted_sorted = np.minimum(1.0, np.maximum.accumulate(stepped))
    adjusted = np.empty_like(adjusted_sorted)
    adjusted[order] = adjusted_sorted
    return adjusted


def holm_not_evaluated(pvalues, alpha: float = HOLM_ALPHA) -> np.ndarray:
    """Early-stop flags: True for hypotheses after the first sorted non-rejection.

    The first sorted hypothesis whose adjusted p reaches alpha is still
    evaluated (and reported); everything ranked after it is flagged True and
    carries no reportable adjusted p.
    """
    p = _check_pvalues(pvalues)
    order = np.argsort(p, kind="stable")
    adjusted_sorted = holm_adjust(p)[order]
    flags_sorted = np.zeros(p.size, dtype=bool)
    failed = np.flatnonzero(adjusted_sorted >= alpha)
    if failed.size:
        flags_sorted[failed[0] + 1:] = True
    flags = np.empty_like(flags_sorted)
    flags[order] = flags_sorted
    return flags
