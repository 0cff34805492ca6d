import numpy as np
import pytest
from scipy.stats import rankdata
from scipy.stats import wilcoxon as scipy_wilcoxon

from cbir_dx.errors import ValidationError
from cbir_dx.metrics import rank_auc
from cbir_dx.stats import (
    HOLM_ALPHA,
    UndefinedMetric,
    bootstrap_ci,
    delong_auc,
    delong_compare,
    holm_adjust,
    holm_not_evaluated,
    normality_gate,
    paired_t,
    paired_test,
    wilcoxon_signed_rank,
)
from cbir_dx.synth import brute_wilcoxon_exact


def _mixed_truth(rng, n):
    truth = rng.random(size=n) < 0.5
    truth[:2] = True
    truth[2:4] = False  # DeLong needs two cases per class
    return truth


# --- DeLong -----------------------------------------------------------------

def test_delong_auc_equals_rank_auc():
    rng = np.random.default_rng(71)
    for _ in range(50):
        n = int(rng.integers(6, 200))
        scores = np.round(rng.normal(size=n), 1)
        truth = _mixed_truth(rng, n)
        assert abs(delong_auc(scores, truth) - rank_auc(scores, truth)) <= 1e-12


def test_delong_self_comparison_is_null():
    rng = np.random.default_rng(72)
    for _ in range(20):
        n = int(rng.integers(6, 100))
        scores = rng.normal(size=n)
        truth = _mixed_truth(rng, n)
        cmp = delong_compare(scores, scores, truth)
        assert cmp.z == 0.0
        assert cmp.p_value == 1.0
        assert cmp.auc_a == cmp.auc_b


def test_delong_swap_flips_z_keeps_p():
    rng = np.random.default_rng(73)
    a = rng.normal(size=60)
    b = a + rng.normal(size=60) * 0.5
    truth = _mixed_truth(rng, 60)
    ab = delong_compare(a, b, truth)
    ba = delong_compare(b, a, truth)
    assert ab.z == pytest.approx(-ba.z, abs=1e-12)
    assert ab.p_value == pytest.approx(ba.p_value, abs=1e-12)


def test_delong_variance_against_independent_placements():
    """Recompute the paired variance with nested python loops (no midranks,
    explicit 0/0.5/1 comparisons) and check z agrees."""
    rng = np.random.default_rng(74)
    for _ in range(10):
        n = 20
        a = np.round(rng.normal(size=n), 1)
        b = np.round(rng.normal(size=n), 1)
        truth = rng.random(size=n) < 0.5
        truth[:3] = True
        truth[-3:] = False

        def placements(scores):
            pos = scores[truth]
            neg = scores[~truth]
            v10 = np.array(
                [np.mean([(x > y) + 0.5 * (x == y) for y in neg]) for x in pos]
            )
            v01 = np.array(
                [np.mean([(x > y) + 0.5 * (x == y) for x in pos]) for y in neg]
            )
            return v10, v01

        a10, a01 = placements(a)
        b10, b01 = placements(b)
        auc_a, auc_b = a10.mean(), b10.mean()
        s10 = np.cov(np.stack([a10, b10]), ddof=1)
        s01 = np.cov(np.stack([a01, b01]), ddof=1)
        contrast = np.array([1.0, -1.0])
        var = contrast @ s10 @ contrast / len(a10) + contrast @ s01 @ contrast / len(a01)
        want_z = (auc_a - auc_b) / np.sqrt(var)

        got = delong_compare(a, b, truth)
        assert got.auc_a == pytest.approx(auc_a, abs=1e-12)
        assert got.auc_b == pytest.approx(auc_b, abs=1e-12)
        assert got.z == pytest.approx(want_z, abs=1e-10)


def test_delong_needs_two_per_class():
    with pytest.raises(ValidationError):
        delong_compare([0.1, 0.2, 0.3], [0.3, 0.2, 0.1], [1, 0, 0])
    with pytest.raises(ValidationError):
        delong_compare([0.1, 0.2, 0.3, 0.4], [0.4, 0.3, 0.2, 0.1], [1, 1, 1, 0])


def test_delong_degenerate_variance_unequal_aucs():
    # all scores tied within each vector: variance 0, but AUCs differ
    a = [0.9, 0.8, 0.2, 0.1]
    b = [0.5, 0.5, 0.5, 0.5]
    with pytest.raises(ValidationError, match="variance"):
        delong_compare(a, b, [1, 1, 0, 0])


# --- bootstrap --------------------------------------------------------------

def test_bootstrap_constant_metric_zero_width():
    ci = bootstrap_ci(lambda idx: 0.7, (np.arange(5), np.arange(5, 12)), replicates=50)
    assert ci.low == ci.high == ci.point == 0.7


def test_bootstrap_perfect_separation_pins_auc_at_one():
    scores = np.array([0.9, 0.8, 0.85, 0.2, 0.1, 0.15])
    truth = np.array([True, True, True, False, False, False])
    pos = np.flatnonzero(truth)
    neg = np.flatnonzero(~truth)
    ci = bootstrap_ci(
        lambda idx: rank_auc(scores[idx], truth[idx]),
        (pos, neg),
        replicates=200,
    )
    assert ci.point == 1.0
    assert ci.low == 1.0 and ci.high == 1.0


def test_bootstrap_is_deterministic():
    rng = np.random.default_rng(75)
    scores = rng.normal(size=40)
    truth = _mixed_truth(rng, 40)
    pos, neg = np.flatnonzero(truth), np.flatnonzero(~truth)
    metric = lambda idx: rank_auc(scores[idx], truth[idx])
    first = bootstrap_ci(metric, (pos, neg), replicates=100, seed=4)
    second = bootstrap_ci(metric, (pos, neg), replicates=100, seed=4)
    assert (first.low, first.high) == (second.low, second.high)
    other = bootstrap_ci(metric, (pos, neg), replicates=100, seed=5)
    assert (first.low, first.high) != (other.low, other.high)


def test_bootstrap_interval_brackets_point():
    rng = np.random.default_rng(76)
    scores = rng.normal(size=80) + np.where(_mixed_truth(rng, 80), 0.8, 0.0)
    truth = _mixed_truth(rng, 80)
    pos, neg = np.flatnonzero(truth), np.flatnonzero(~truth)
    ci = bootstrap_ci(lambda idx: rank_auc(scores[idx], truth[idx]), (pos, neg))
    assert ci.low <= ci.point <= ci.high
    assert ci.replicates == 2000


def test_bootstrap_empty_stratum_rejected():
    with pytest.raises(ValidationError, match="stratum is empty"):
        bootstrap_ci(lambda idx: 0.5, (np.array([], dtype=int), np.arange(3)))


def test_bootstrap_undefined_metric_redraw_cap():
    calls = {"first": True}

    def cursed(idx):
        # defined on the original sample (the point estimate), undefined on
        # every resample
        if calls["first"]:
            calls["first"] = False
            return 0.5
        raise UndefinedMetric("no positives drawn")

    with pytest.raises(ValidationError, match="after 10 redraws"):
        bootstrap_ci(cursed, (np.arange(2), np.arange(2, 4)), replicates=3)


def test_bootstrap_survives_occasional_undefined():
    calls = {"n": 0}

    def flaky(idx):
        calls["n"] += 1
        if calls["n"] % 3 == 0:
            raise UndefinedMetric("unlucky draw")
        return 0.6

    ci = bootstrap_ci(flaky, (np.arange(3), np.arange(3, 6)), replicates=30)
    assert ci.low == ci.high == 0.6


# --- paired t ---------------------------------------------------------------

def test_paired_t_known_values():
    res = paired_t([1.0, 2.0, 3.0])
    assert res.statistic == pytest.approx(2.0 * np.sqrt(3.0), abs=1e-12)
    assert res.p_value == pytest.approx(0.0742, abs=5e-4)
    assert res.test == "t"
    assert res.n == 3


def test_paired_t_zero_mean():
    res = paired_t([-1.0, 1.0, -1.0, 1.0])
    assert res.statistic == 0.0
    assert res.p_value == 1.0


def test_paired_t_scale_invariant():
    d = np.array([0.3, -0.2, 0.5, 0.1, -0.4, 0.25])
    base = paired_t(d)
    for c in (1e-6, 0.5, 1e6):
        scaled = paired_t(c * d)
        assert scaled.statistic == pytest.approx(base.statistic, rel=1e-12)
        assert scaled.p_value == pytest.approx(base.p_value, rel=1e-9)


def test_paired_t_degenerate_inputs():
    with pytest.raises(ValidationError, match="zero variance"):
        paired_t([0.5, 0.5, 0.5])
    with pytest.raises(ValidationError, match="n >= 2"):
        paired_t([0.5])


# --- wilcoxon ---------------------------------------------------------------

def test_wilcoxon_all_positive():
    res = wilcoxon_signed_rank([1.0, 2.0, 3.0, 4.0, 5.0])
    assert res.statistic == 15.0
    assert res.p_value == pytest.approx(0.0625, abs=1e-12)
    assert res.test == "wilcoxon"


def test_wilcoxon_symmetric_pair():
    res = wilcoxon_signed_rank([-1.0, 1.0])
    assert res.p_value == 1.0


def test_wilcoxon_zeros_are_dropped():
    with_zeros = wilcoxon_signed_rank([0.0, 1.0, 2.0, 0.0, 3.0, 4.0, 5.0])
    without = wilcoxon_signed_rank([1.0, 2.0, 3.0, 4.0, 5.0])
    assert with_zeros.statistic == without.statistic
    assert with_zeros.p_value == without.p_value
    assert with_zeros.n == 5


def test_wilcoxon_all_zero_rejected():
    with pytest.raises(ValidationError, match="all differences are zero"):
        wilcoxon_signed_rank([0.0, 0.0, 0.0])


def test_wilcoxon_exact_matches_sign_enumeration():
    rng = np.random.default_rng(77)
    for _ in range(60):
        n = int(rng.integers(1, 11))
        d = rng.integers(-5, 6, size=n).astype(float)
        if not np.any(d):
            d[0] = 1.0
        got = wilcoxon_signed_rank(d)
        want = brute_wilcoxon_exact(d)
        assert got.statistic == want.statistic
        assert got.p_value == want.p_value  # bitwise, both integer-count based


def test_wilcoxon_exact_handles_ties():
    # tied magnitudes force fractional midranks; doubling keeps them integral
    res = wilcoxon_signed_rank([1.0, 1.0, -1.0, 2.0])
    want = brute_wilcoxon_exact([1.0, 1.0, -1.0, 2.0])
    assert res.p_value == want.p_value


def test_wilcoxon_statistic_is_positive_rank_sum():
    d = np.array([3.0, -1.0, 2.0, -4.0])
    ranks = rankdata(np.abs(d))
    want = float(ranks[d > 0].sum())
    assert wilcoxon_signed_rank(d).statistic == want


def test_wilcoxon_normal_approximation_matches_scipy():
    rng = np.random.default_rng(78)
    for _ in range(20):
        n = int(rng.integers(26, 80))
        d = rng.normal(loc=0.2, size=n)
        if rng.random() < 0.5:
            d = np.round(d, 1)  # force tied magnitudes
            d = d[d != 0.0]
        if d.size < 26:
            continue
        mine = wilcoxon_signed_rank(d)
        ref = scipy_wilcoxon(d, mode="approx", correction=True)
        assert mine.p_value == pytest.approx(float(ref.pvalue), rel=1e-10)


def test_wilcoxon_normal_approximation_tracks_exact():
    # same data through both branches at the crossover length
    rng = np.random.default_rng(80)
    d = rng.normal(loc=0.15, size=26)
    exact = wilcoxon_signed_rank(d, exact_cutoff=26)
    approx = wilcoxon_signed_rank(d, exact_cutoff=25)
    assert approx.statistic == exact.statistic
    assert approx.p_value == pytest.approx(exact.p_value, rel=0.05)


def test_wilcoxon_p_capped_at_one():
    rng = np.random.default_rng(79)
    for _ in range(30):
        n = int(rng.integers(2, 40))
        d = rng.normal(size=n)
        res = wilcoxon_signed_rank(d)
        assert 0.0 < res.p_value <= 1.0


# --- normality gate ---------------------------------------------------------

def test_gate_accepts_seeded_normal_sample():
    rng = np.random.default_rng(20_240_130)
    assert normality_gate(rng.normal(size=500)) == "t"


def test_gate_rejects_seeded_exponential_sample():
    rng = np.random.default_rng(20_240_131)
    assert normality_gate(rng.exponential(size=500)) == "wilcoxon"


def test_gate_small_sample_warns_and_uses_wilcoxon():
    with pytest.warns(UserWarning, match="n=5 < 8"):
        assert normality_gate([0.1, 0.4, -0.2, 0.3, 0.5]) == "wilcoxon"


def test_gate_constant_sample_uses_wilcoxon():
    assert normality_gate([2.0] * 20) == "wilcoxon"


def test_paired_test_dispatches():
    rng = np.random.default_rng(20_240_132)
    normal = rng.normal(loc=0.2, size=100)
    res = paired_test(normal)
    assert res.test == "t"
    skewed = rng.exponential(size=100)
    res = paired_test(skewed)
    assert res.test == "wilcoxon"


# --- holm -------------------------------------------------------------------

def test_holm_fixture():
    adj = holm_adjust([0.01, 0.04, 0.03])
    assert np.allclose(adj, [0.03, 0.06, 0.06], atol=1e-15)


def test_holm_single_p_unchanged():
    assert holm_adjust([0.2]) == pytest.approx([0.2])


def test_holm_caps_at_one():
    assert np.array_equal(holm_adjust([0.5, 0.5]), [1.0, 1.0])
    assert np.array_equal(holm_adjust([0.9, 0.8, 0.7]), [1.0, 1.0, 1.0])


def test_holm_never_below_input():
    rng = np.random.default_rng(20_240_133)
    for _ in range(200):
        m = int(rng.integers(1, 12))
        p = rng.random(size=m)
        adj = holm_adjust(p)
        assert np.all(adj >= p)
        assert np.all(adj <= 1.0)


def test_holm_keeps_order_alignment():
    p = [0.04, 0.01, 0.03]
    adj = holm_adjust(p)
    # adjusted values follow the same positions as their inputs
    assert adj[1] == pytest.approx(0.03)
    assert adj[0] == pytest.approx(0.06)
    assert adj[2] == pytest.approx(0.06)


def test_holm_monotone_in_sorted_order():
    rng = np.random.default_rng(20_240_134)
    for _ in range(100):
        p = rng.random(size=int(rng.integers(2, 10)))
        adj = holm_adjust(p)
        order = np.argsort(p, kind="stable")
        assert np.all(np.diff(adj[order]) >= 0)


def test_holm_idempotent_on_saturated_vectors():
    # once every adjusted value hits the cap, re-adjusting changes nothing
    p = [0.6, 0.7, 0.9]
    once = holm_adjust(p)
    assert np.array_equal(holm_adjust(once), once)


def test_holm_rejects_out_of_range():
    with pytest.raises(ValidationError):
        holm_adjust([0.5, 1.5])
    with pytest.raises(ValidationError):
        holm_adjust([-0.1])
    with pytest.raises(ValidationError):
        holm_adjust([])


def test_holm_stop_rule_flags():
    # sorted: 0.001, 0.02, 0.3, 0.4 -> adj 0.004, 0.06 (>= alpha, last
    # evaluated), rest not evaluated
    p = [0.3, 0.001, 0.4, 0.02]
    flags = holm_not_evaluated(p)
    assert list(flags) == [True, False, True, False]


def test_holm_stop_rule_all_evaluated_when_all_pass():
    flags = holm_not_evaluated([0.001, 0.002, 0.003])
    assert not flags.any()


def test_holm_stop_rule_only_first_when_none_pass():
    flags = holm_not_evaluated([0.9, 0.8, 0.95])
    # the smallest p is evaluated (and fails); everything after it is skipped
    order = np.argsort([0.9, 0.8, 0.95], kind="stable")
    evaluated = np.flatnonzero(~flags)
    assert list(evaluated) == [order[0]]


def test_holm_stop_rule_alpha_override():
    p = [0.04, 0.3]
    strict = holm_not_evaluated(p, alpha=0.01)
    assert list(strict) == [False, True]
    loose = holm_not_evaluated(p, alpha=0.9)
    assert not loose.any()
    assert HOLM_ALPHA == 0.05
