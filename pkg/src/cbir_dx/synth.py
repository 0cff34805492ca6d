"""Synthetic embedding fixtures and brute-force reference implementations.

Real dermatoscopic embedding sets are private, so trust in the fast paths has
to come from self-verification: this module generates controllable Gaussian
cluster data (with an analytically correct class-posterior standing in for a
trained softmax head) and carries exhaustive-definition oracles for the
retrieval and metric code.  The oracles ship with the package, not the test
suite, so `cbir-dx synth --self-check` can run the whole battery in the field.

Oracles are deliberately written from the definitions (full sort, all-pairs
counting, threshold enumeration, complete sign enumeration) with their own
rank/threshold bookkeeping; they share no helper with the fast paths they
check.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml

from . import metrics, stats
from .datasets import (
    SOFTMAX_SUFFIX,
    SPLITS,
    Dataset,
    EmbeddingRecord,
    SoftmaxTable,
    write_manifest,
    write_softmax,
)
from .errors import OracleCapError, ValidationError
from .index import NormalizedIndex, RetrievalResult, top_k

TOP_K_CAP = 2000
PAIRWISE_CAP = 500
EXACT_SIGN_CAP = 12

_SPEC_KEYS = {
    "name", "labels", "dimension", "sigma", "counts",
    "seed", "nonnegative", "separation", "means",
}


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for one isotropic-Gaussian-cluster embedding dataset.

    One cluster per label, balanced per-class counts within each split, one
    image per lesion.  ``nonnegative`` clips samples elementwise at zero to
    mimic post-activation features (all-zero rows are redrawn).
    """

    name: str
    labels: tuple[str, ...]
    means: np.ndarray           # (classes, dimension), float64
    sigma: float
    counts: Mapping[str, int]   # split -> per-class sample count
    seed: int
    nonnegative: bool = False

    def __post_init__(self):
        if not self.name:
            raise ValidationError("spec name must not be empty")
        labels = tuple(self.labels)
        if len(labels) < 2 or len(set(labels)) != len(labels):
            raise ValidationError("need >= 2 distinct class labels")
        means = np.asarray(self.means, dtype=np.float64)
        if means.ndim != 2 or means.shape[0] != len(labels):
            raise ValidationError(
                f"means must be (classes, dimension), got shape {means.shape}"
            )
        if means.shape[1] < 2:
            raise ValidationError(f"dimension must be >= 2, got {means.shape[1]}")
        for i, j in itertools.combinations(range(len(labels)), 2):
            if np.array_equal(means[i], means[j]):
                raise ValidationError(
                    f"class means must be pairwise distinct "
                    f"('{labels[i]}' == '{labels[j]}')"
                )
        if not self.sigma > 0.0:
            raise ValidationError(f"sigma must be > 0, got {self.sigma}")
        counts = dict(self.counts)
        unknown = set(counts) - set(SPLITS)
        if unknown:
            raise ValidationError(f"unknown splits in counts: {sorted(unknown)}")
        for split, count in counts.items():
            if int(count) != count or count < 0:
                raise ValidationError(f"counts['{split}'] must be a non-negative integer")
        if counts.get("train", 0) < 1 or counts.get("test", 0) < 1:
            raise ValidationError("counts must include train >= 1 and test >= 1")
        means.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "sigma", float(self.sigma))
        object.__setattr__(self, "counts", {s: int(counts.get(s, 0)) for s in SPLITS})
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def dimension(self) -> int:
        return int(self.means.shape[1])


def auto_means(
    n_classes: int, dimension: int, separation: float, seed: int, nonnegative: bool = False
) -> np.ndarray:
    """Random unit directions scaled by ``separation`` (folded positive if asked).

    Drawn from a dedicated substream so sample draws in generate() do not
    depend on whether means were explicit or generated.
    """
    if not separation > 0.0:
        raise ValidationError(f"separation must be > 0, got {separation}")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 1)))
    directions = rng.standard_normal((n_classes, dimension))
    if nonnegative:
        directions = np.abs(directions)
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    return separation * directions / norms


def load_synth_spec(path) -> SynthSpec:
    """Parse a YAML spec document, fully validated before use."""
    path = Path(path)
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: spec document must be a mapping")
    unknown = set(doc) - _SPEC_KEYS
    if unknown:
        raise ValidationError(f"{path}: unknown spec keys: {sorted(unknown)}")
    missing = {"name", "labels", "dimension", "sigma", "counts", "seed"} - set(doc)
    if missing:
        raise ValidationError(f"{path}: missing spec keys: {sorted(missing)}")
    labels = tuple(str(lbl) for lbl in doc["labels"])
    nonnegative = bool(doc.get("nonnegative", False))
    if "means" in doc:
        means = np.asarray(doc["means"], dtype=np.float64)
    else:
        means = auto_means(
            len(labels), int(doc["dimension"]),
            float(doc.get("separation", 3.0)), int(doc["seed"]), nonnegative,
        )
    if means.ndim != 2 or means.shape[1] != int(doc["dimension"]):
        raise ValidationError(
            f"{path}: means do not match the declared dimension {doc['dimension']}"
        )
    return SynthSpec(
        name=str(doc["name"]),
        labels=labels,
        means=means,
        sigma=float(doc["sigma"]),
        counts={str(k): int(v) for k, v in dict(doc["counts"]).items()},
        seed=int(doc["seed"]),
        nonnegative=nonnegative,
    )


def _posterior_rows(vectors: np.ndarray, means: np.ndarray, sigma: float) -> np.ndarray:
    """Class posterior of the generating mixture at each vector.

    Balanced per-class counts mean equal priors, so the posterior is the
    softmax of -||v - mu_c||^2 / (2 sigma^2), computed max-shifted.
    """
    sq = ((vectors[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    logw = -sq / (2.0 * sigma * sigma)
    logw -= logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    return w / w.sum(axis=1, keepdims=True)


def generate(spec: SynthSpec) -> tuple[Dataset, SoftmaxTable]:
    """Sample the dataset plus the analytic softmax table for its test split.

    Fully deterministic under the spec seed: splits, classes and rows are
    drawn in a fixed order from one substream.
    """
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 2)))
    records = []
    for split in SPLITS:
        count = spec.counts.get(split, 0)
        for ci, label in enumerate(spec.labels):
            samples = spec.means[ci] + spec.sigma * rng.standard_normal(
                (count, spec.dimension)
            )
            if spec.nonnegative:
                samples = np.maximum(samples, 0.0)
                for _ in range(100):
                    dead = np.flatnonzero(~samples.any(axis=1))
                    if dead.size == 0:
                        break
                    redraw = spec.means[ci] + spec.sigma * rng.standard_normal(
                        (dead.size, spec.dimension)
                    )
                    samples[dead] = np.maximum(redraw, 0.0)
                else:
                    raise ValidationError(
                        f"class '{label}': could not draw a nonzero sample in "
                        f"100 attempts (mean too far below zero?)"
                    )
            for i in range(count):
                stem = f"{spec.name}-{split}-{label}-{i:04d}"
                records.append(
                    EmbeddingRecord(
                        image_id=stem,
                        lesion_id="L" + stem,
                        label=label,
                        split=split,
                        vector=samples[i],
                    )
                )
    ds = Dataset(name=spec.name, records=tuple(records), label_set=spec.labels)

    test = ds.split_records("test")
    vectors = np.stack([r.vector for r in test]).astype(np.float64)
    posterior = _posterior_rows(vectors, spec.means, spec.sigma)
    rows = {rec.image_id: posterior[i] for i, rec in enumerate(test)}
    return ds, SoftmaxTable(classes=spec.labels, rows=rows)


def restrict_softmax(table: SoftmaxTable, classes: Sequence[str]) -> SoftmaxTable:
    """The softmax a model trained on only ``classes`` would produce.

    With shared class-conditional densities, restricting to a label subset and
    renormalizing equals the subset model's own posterior, so this is exact,
    not an approximation.  Rows where every kept probability underflowed to
    zero fall back to uniform.
    """
    unknown = set(classes) - set(table.classes)
    if unknown:
        raise ValidationError(f"restriction names unknown classes: {sorted(unknown)}")
    keep = tuple(c for c in table.classes if c in set(classes))
    if len(keep) < 2:
        raise ValidationError(
            f"restriction must keep >= 2 known classes, kept {list(keep)}"
        )
    cols = [table.classes.index(c) for c in keep]
    rows = {}
    for image_id, row in table.rows.items():
        sub = np.asarray(row, dtype=np.float64)[cols]
        total = sub.sum()
        rows[image_id] = sub / total if total > 0.0 else np.full(len(keep), 1.0 / len(keep))
    return SoftmaxTable(classes=keep, rows=rows)


def emit(spec: SynthSpec, out_dir) -> tuple[Path, Path]:
    """Generate and write the manifest/vectors/softmax file triple."""
    ds, table = generate(spec)
    manifest_path = write_manifest(ds, out_dir)
    softmax_path = write_softmax(table, Path(out_dir) / (spec.name + SOFTMAX_SUFFIX))
    return manifest_path, softmax_path


# --- brute-force oracles ---------------------------------------------------


def brute_top_k(index: NormalizedIndex, query, k: int, query_id: str = "") -> RetrievalResult:
    """Reference retrieval: score every row, full sort, cut at k.

    Same arithmetic contract as the fast path (stored unit rows in float32,
    float64 accumulation, ties broken by pool position) but via per-row dot
    products and a complete Python sort.
    """
    n = len(index)
    if n > TOP_K_CAP:
        raise OracleCapError(f"brute_top_k capped at {TOP_K_CAP} rows, got {n}")
    if not 1 <= k <= n:
        raise ValidationError(f"k={k} out of range for pool size {n}")
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    norm = np.linalg.norm(q)
    if norm == 0.0:
        raise ValidationError("zero norm: cosine undefined for a zero vector")
    q64 = (q / norm).astype(np.float32).astype(np.float64)
    sims = [
        min(1.0, max(-1.0, float(np.dot(index.matrix[j].astype(np.float64), q64))))
        for j in range(n)
    ]
    order = sorted(range(n), key=lambda j: (-sims[j], j))
    neighbors = tuple((index.image_ids[j], sims[j]) for j in order[:k])
    return RetrievalResult(query_id=query_id, neighbors=neighbors)


def brute_auc(scores, truth) -> float:
    """Reference AUC: Mann-Whitney counting over every (positive, negative) pair."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    t = np.asarray(truth, dtype=bool).reshape(-1)
    if s.size > PAIRWISE_CAP:
        raise OracleCapError(f"brute_auc capped at {PAIRWISE_CAP} samples, got {s.size}")
    pos = s[t]
    neg = s[~t]
    if pos.size == 0 or neg.size == 0:
        raise ValidationError("need at least one positive and one negative")
    diff = pos[:, None] - neg[None, :]
    wins = np.count_nonzero(diff > 0) + 0.5 * np.count_nonzero(diff == 0)
    return float(wins / (pos.size * neg.size))


def brute_ap(scores, truth) -> float:
    """Reference AP: evaluate precision/recall at every distinct cutoff."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    t = np.asarray(truth, dtype=bool).reshape(-1)
    if s.size > PAIRWISE_CAP:
        raise OracleCapError(f"brute_ap capped at {PAIRWISE_CAP} samples, got {s.size}")
    p = int(t.sum())
    if p == 0:
        raise ValidationError("no positives: average precision undefined")
    ap = 0.0
    last_recall = 0.0
    for cutoff in sorted(set(s.tolist()), reverse=True):
        predicted = s >= cutoff
        tp = int(np.count_nonzero(predicted & t))
        precision = tp / int(np.count_nonzero(predicted))
        recall = tp / p
        ap += (recall - last_recall) * precision
        last_recall = recall
    return ap


def _average_ranks_doubled(values: np.ndarray) -> list[int]:
    """Average ranks of ``values`` times two, by explicit group walking."""
    order = sorted(range(values.size), key=lambda i: values[i])
    doubled = [0] * values.size
    start = 0
    while start < len(order):
        stop = start
        while stop < len(order) and values[order[stop]] == values[order[start]]:
            stop += 1
        rank2 = (start + 1) + stop          # 2 * average of ranks start+1 .. stop
        for pos in range(start, stop):
            doubled[order[pos]] = rank2
        start = stop
    return doubled


def brute_wilcoxon_exact(diffs) -> stats.PairedTestResult:
    """Reference signed-rank test: enumerate all 2^n sign patterns.

    Uses integer doubled ranks throughout, so its p-value is bitwise
    comparable with the fast path's convolution count.
    """
    d = np.asarray(diffs, dtype=np.float64).reshape(-1)
    nonzero = d[d != 0.0]
    n = nonzero.size
    if n == 0:
        raise ValidationError("all differences are zero: signed-rank test undefined")
    if n > EXACT_SIGN_CAP:
        raise OracleCapError(f"brute_wilcoxon_exact capped at n={EXACT_SIGN_CAP}, got {n}")
    doubled = _average_ranks_doubled(np.abs(nonzero))
    observed = sum(r for r, v in zip(doubled, nonzero) if v > 0)
    count_le = 0
    count_ge = 0
    for signs in itertools.product((0, 1), repeat=n):
        w2 = sum(r for r, s in zip(doubled, signs) if s)
        count_le += w2 <= observed
        count_ge += w2 >= observed
    p = min(1.0, 2.0 * min(count_le, count_ge) / 2**n)
    return stats.PairedTestResult(statistic=observed / 2.0, p_value=p, test="wilcoxon", n=n)


# --- oracle battery --------------------------------------------------------


def _tied_scores(rng, n: int) -> np.ndarray:
    """Random scores with a deliberately high tie rate."""
    if rng.random() < 0.5:
        return np.round(rng.random(n), 1)
    return rng.random(n)


def _split_truth(rng, n: int) -> np.ndarray:
    """Random truth with at least one positive and one negative."""
    t = rng.random(n) < rng.uniform(0.1, 0.9)
    if t.all() or not t.any():
        t[0] = False
        t[-1] = True
    return t


def check_top_k(instances: int = 200, seed: int = 20_240_101) -> int:
    """Fast retrieval equals the full-sort oracle, id lists compared exactly."""
    rng = np.random.default_rng(seed)
    for case in range(instances):
        n = int(rng.integers(20, TOP_K_CAP + 1))
        d = int(rng.integers(2, 129))
        matrix = rng.standard_normal((n, d))
        if rng.random() < 0.5:
            # inject exact duplicates to force ties on the position rule
            dup = rng.integers(0, n, size=max(2, n // 10))
            matrix[dup] = matrix[dup[0]]
        norm = np.linalg.norm(matrix, axis=1, keepdims=True)
        matrix32 = (matrix / norm).astype(np.float32)
        index = NormalizedIndex(
            matrix32,
            image_ids=[f"p{j}" for j in range(n)],
            lesion_ids=[f"l{j}" for j in range(n)],
            labels=["x"] * n,
        )
        query = matrix[int(rng.integers(0, n))] if rng.random() < 0.3 else rng.standard_normal(d)
        k = int(rng.integers(1, min(n, 64) + 1))
        fast = top_k(index, query, k, query_id=f"case{case}")
        slow = brute_top_k(index, query, k, query_id=f"case{case}")
        if fast.ids != slow.ids:
            raise RuntimeError(
                f"top_k mismatch on case {case} (n={n}, d={d}, k={k}): "
                f"{fast.ids[:5]}... vs {slow.ids[:5]}..."
            )
    return instances


def check_auc(instances: int = 200, seed: int = 20_240_102, tol: float = 1e-12) -> int:
    """Both AUC paths (trapezoid and midrank) equal the all-pairs count."""
    rng = np.random.default_rng(seed)
    for case in range(instances):
        n = int(rng.integers(4, PAIRWISE_CAP + 1))
        scores = _tied_scores(rng, n)
        truth = _split_truth(rng, n)
        want = brute_auc(scores, truth)
        got_curve = metrics.roc_auc(scores, truth).auc
        got_rank = metrics.rank_auc(scores, truth)
        if abs(got_curve - want) > tol or abs(got_rank - want) > tol:
            raise RuntimeError(
                f"AUC mismatch on case {case} (n={n}): curve={got_curve!r} "
                f"rank={got_rank!r} pairs={want!r}"
            )
    return instances


def check_ap(instances: int = 200, seed: int = 20_240_103, tol: float = 1e-12) -> int:
    """Step-sum AP equals the threshold-enumeration oracle."""
    rng = np.random.default_rng(seed)
    for case in range(instances):
        n = int(rng.integers(4, PAIRWISE_CAP + 1))
        scores = _tied_scores(rng, n)
        truth = _split_truth(rng, n)
        want = brute_ap(scores, truth)
        got = metrics.average_precision(scores, truth)
        if abs(got - want) > tol:
            raise RuntimeError(
                f"AP mismatch on case {case} (n={n}): {got!r} vs {want!r}"
            )
    return instances


def check_wilcoxon(instances: int = 100, seed: int = 20_240_104) -> int:
    """Exact signed-rank p equals complete sign enumeration, bitwise."""
    rng = np.random.default_rng(seed)
    done = 0
    while done < instances:
        n = int(rng.integers(1, 11))
        diffs = rng.integers(-5, 6, size=n).astype(np.float64)
        if not np.any(diffs != 0.0):
            continue
        fast = stats.wilcoxon_signed_rank(diffs)
        slow = brute_wilcoxon_exact(diffs)
        if fast.p_value != slow.p_value or fast.statistic != slow.statistic:
            raise RuntimeError(
                f"wilcoxon mismatch on diffs {diffs.tolist()}: "
                f"({fast.statistic}, {fast.p_value}) vs ({slow.statistic}, {slow.p_value})"
            )
        done += 1
    return instances


def self_check() -> list[tuple[str, int]]:
    """Run every oracle battery; raises on the first mismatch."""
    return [
        ("top_k vs full sort", check_top_k()),
        ("auc vs pair counting", check_auc()),
        ("ap vs threshold enumeration", check_ap()),
        ("wilcoxon vs sign enumeration", check_wilcoxon()),
    ]
