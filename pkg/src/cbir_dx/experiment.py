"""Evaluation grid runner: per-k retrieval metrics, cross-source mAP, reports.

The runner owns the full comparison protocol:

* intra runs (train = test = retrieval source): per-k accuracy, operating
  points at the 25% and 50% malignancy cutoffs, AUC with a bootstrap CI,
  macro mAP, and a DeLong comparison against the softmax baseline with Holm
  correction across the k family;
* cross runs: mAP for every (network, test source, retrieval source, k) cell
  plus the per-(network, test) softmax mAP;
* a similarity report: per-query mean cosine to same-label vs different-label
  pool images with per-class paired tests;
* report emission: rendered CSV tables (3 decimals, p-values floored at
  "<0.001"), full-precision JSON, per-image prediction files, plot data and
  figures, and a self-audit that recomputes accuracies from the prediction
  files before the run is declared good.

Everything is deterministic for a fixed (config, seed, inputs) triple and
independent of the worker count: retrieval uses fixed query blocks, bootstrap
replicates draw from schedule-free substreams, and assembly is ordered.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import yaml

from . import classify, metrics, stats
from .datasets import Dataset, SoftmaxTable, build_retrieval_pool, load_manifest, load_softmax
from .errors import ValidationError
from .index import batch_top_k, build_index, resolve_workers
from .metrics import MapResult, RocAnalysis

DEFAULT_K_LIST = (2, 4, 8, 16, 32)
CUTOFFS = (0.25, 0.5)
SWEEP_MAX = 32

_CONFIG_KEYS = {
    "train_source", "test_source", "retrieval_source", "k_list", "seed",
    "replicates", "output", "datasets", "embeddings", "k_sweep",
}
_DATASET_KEYS = {"manifest", "softmax", "malignant"}
_EMBEDDING_KEYS = {"network", "dataset", "manifest", "softmax"}


@dataclass(frozen=True)
class DatasetEntry:
    name: str
    manifest: Path
    softmax: Path | None = None
    malignant: tuple[str, ...] | None = None


@dataclass(frozen=True)
class EmbeddingEntry:
    """One embedding file pair: features of `dataset` extracted by `network`."""

    network: str
    dataset: str
    manifest: Path
    softmax: Path | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    train_source: str
    test_source: str
    retrieval_source: str
    output: Path
    datasets: Mapping[str, DatasetEntry]
    embeddings: tuple[EmbeddingEntry, ...] = ()
    k_list: tuple[int, ...] = DEFAULT_K_LIST
    seed: int = 0
    replicates: int = 2000
    k_sweep: bool = False

    def __post_init__(self):
        k_list = tuple(int(k) for k in self.k_list)
        if not k_list:
            raise ValidationError("k_list must not be empty")
        if any(k < 1 for k in k_list):
            raise ValidationError(f"k_list entries must be >= 1, got {list(k_list)}")
        if list(k_list) != sorted(set(k_list)):
            raise ValidationError(
                f"k_list must be strictly ascending, got {list(k_list)}"
            )
        if self.replicates < 1:
            raise ValidationError(f"replicates must be >= 1, got {self.replicates}")
        for role, source in (
            ("train_source", self.train_source),
            ("test_source", self.test_source),
            ("retrieval_source", self.retrieval_source),
        ):
            if source not in self.datasets:
                raise ValidationError(f"{role} '{source}' is not a configured dataset")
        object.__setattr__(self, "k_list", k_list)
        object.__setattr__(self, "embeddings", tuple(self.embeddings))
        object.__setattr__(self, "output", Path(self.output))
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "replicates", int(self.replicates))


def load_config(path) -> ExperimentConfig:
    """Parse and fully validate a YAML run configuration.

    File paths inside the document (manifests, softmax tables, the output
    directory) resolve relative to the config file's own directory, so a
    config travels with its data.
    """
    path = Path(path)
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: config document must be a mapping")
    unknown = set(doc) - _CONFIG_KEYS
    if unknown:
        raise ValidationError(f"{path}: unknown config keys: {sorted(unknown)}")
    missing = {"train_source", "test_source", "retrieval_source", "output", "datasets"} - set(doc)
    if missing:
        raise ValidationError(f"{path}: missing config keys: {sorted(missing)}")
    base = path.parent

    datasets: dict[str, DatasetEntry] = {}
    if not isinstance(doc["datasets"], dict) or not doc["datasets"]:
        raise ValidationError(f"{path}: 'datasets' must be a non-empty mapping")
    for name, body in doc["datasets"].items():
        name = str(name)
        if not isinstance(body, dict):
            raise ValidationError(f"{path}: dataset '{name}' must be a mapping")
        unknown = set(body) - _DATASET_KEYS
        if unknown:
            raise ValidationError(
                f"{path}: dataset '{name}': unknown keys {sorted(unknown)}"
            )
        if "manifest" not in body:
            raise ValidationError(f"{path}: dataset '{name}': missing 'manifest'")
        malignant = body.get("malignant")
        datasets[name] = DatasetEntry(
            name=name,
            manifest=base / str(body["manifest"]),
            softmax=base / str(body["softmax"]) if body.get("softmax") else None,
            malignant=tuple(str(m) for m in malignant) if malignant else None,
        )

    embeddings: list[EmbeddingEntry] = []
    for i, body in enumerate(doc.get("embeddings") or []):
        if not isinstance(body, dict):
            raise ValidationError(f"{path}: embeddings[{i}] must be a mapping")
        unknown = set(body) - _EMBEDDING_KEYS
        if unknown:
            raise ValidationError(
                f"{path}: embeddings[{i}]: unknown keys {sorted(unknown)}"
            )
        missing = {"network", "dataset", "manifest"} - set(body)
        if missing:
            raise ValidationError(
                f"{path}: embeddings[{i}]: missing keys {sorted(missing)}"
            )
        embeddings.append(
            EmbeddingEntry(
                network=str(body["network"]),
                dataset=str(body["dataset"]),
                manifest=base / str(body["manifest"]),
                softmax=base / str(body["softmax"]) if body.get("softmax") else None,
            )
        )
    seen_pairs = set()
    for entry in embeddings:
        key = (entry.network, entry.dataset)
        if key in seen_pairs:
            raise ValidationError(f"{path}: duplicate embedding entry for {key}")
        seen_pairs.add(key)

    return ExperimentConfig(
        train_source=str(doc["train_source"]),
        test_source=str(doc["test_source"]),
        retrieval_source=str(doc["retrieval_source"]),
        output=base / str(doc["output"]),
        datasets=datasets,
        embeddings=tuple(embeddings),
        k_list=tuple(doc.get("k_list", DEFAULT_K_LIST)),
        seed=int(doc.get("seed", 0)),
        replicates=int(doc.get("replicates", 2000)),
        k_sweep=bool(doc.get("k_sweep", False)),
    )


@dataclass(frozen=True)
class MetricRecord:
    """One grid cell.  Cross cells populate only the mAP fields."""

    map_value: float
    map_per_class: Mapping[str, float]
    map_skipped: tuple[str, ...]
    accuracy: float | None = None
    sens_25: float | None = None
    spec_25: float | None = None
    sens_50: float | None = None
    spec_50: float | None = None
    auc: float | None = None
    auc_low: float | None = None
    auc_high: float | None = None
    p_value: float | None = None
    p_adjusted: float | None = None
    not_evaluated: bool = False


@dataclass(frozen=True)
class QueryDetail:
    """Per-query material behind one intra source: predictions, scores, curves."""

    source: str
    query_ids: tuple[str, ...]
    truth: tuple[str, ...]
    malignant_truth: np.ndarray
    predictions: Mapping[int, tuple[str, ...]]
    malignancy: Mapping[int, np.ndarray]
    softmax_predictions: tuple[str, ...]
    softmax_malignancy: np.ndarray
    accuracy_by_k: Mapping[int, float]
    roc: Mapping[str, RocAnalysis]


@dataclass(frozen=True)
class ExperimentGrid:
    """Cells keyed (train, test, cbir_source, k) plus per-(train, test) softmax.

    Construction re-checks coverage: every requested (train, test, cbir)
    triple must carry the full k family and a softmax record, so a partially
    assembled grid cannot exist.
    """

    kind: str
    k_list: tuple[int, ...]
    cells: Mapping[tuple[str, str, str, int], MetricRecord]
    softmax_cells: Mapping[tuple[str, str], MetricRecord]
    details: Mapping[str, QueryDetail] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("intra", "cross"):
            raise ValidationError(f"unknown grid kind '{self.kind}'")
        triples = {key[:3] for key in self.cells}
        for train, test, cbir in sorted(triples):
            for k in self.k_list:
                if (train, test, cbir, k) not in self.cells:
                    raise ValidationError(
                        f"grid gap: missing cell ({train}, {test}, {cbir}, k={k})"
                    )
            if (train, test) not in self.softmax_cells:
                raise ValidationError(
                    f"grid gap: missing softmax record for ({train}, {test})"
                )
        expected = len(triples) * len(self.k_list)
        if len(self.cells) != expected:
            raise ValidationError(
                f"grid has {len(self.cells)} cells, expected {expected}"
            )


def _cell_seed(seed: int, *tags: int) -> int:
    """A per-cell substream seed, stable under any execution order."""
    return int(np.random.SeedSequence((seed,) + tags).generate_state(1)[0])


def _map_jobs(fn, items, workers: int):
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def _dataset_for(config: ExperimentConfig, name: str) -> DatasetEntry:
    try:
        return config.datasets[name]
    except KeyError:
        raise ValidationError(f"'{name}' is not a configured dataset") from None


def _auc_ci(scores, truth, replicates, seed) -> stats.ConfidenceInterval:
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth, dtype=bool)
    pos = np.flatnonzero(truth)
    neg = np.flatnonzero(~truth)

    def metric(idx, scores=scores, truth=truth):
        return metrics.rank_auc(scores[idx], truth[idx])

    return stats.bootstrap_ci(metric, (pos, neg), replicates=replicates, seed=seed)


def run_intra(config: ExperimentConfig, workers: int | None = None) -> ExperimentGrid:
    """Same-source evaluation over the configured k family plus softmax.

    Retrieval happens once at the largest needed k; the per-k views are
    prefixes of that single ranking.
    """
    source = config.train_source
    if not (source == config.test_source == config.retrieval_source):
        raise ValidationError(
            "intra run needs train_source == test_source == retrieval_source, got "
            f"({config.train_source}, {config.test_source}, {config.retrieval_source})"
        )
    entry = _dataset_for(config, source)
    if entry.softmax is None:
        raise ValidationError(f"dataset '{source}': intra run needs a softmax table")
    if entry.malignant is None:
        raise ValidationError(f"dataset '{source}': intra run needs a malignant set")

    ds = load_manifest(entry.manifest)
    softmax = load_softmax(entry.softmax, ds)
    malignant = classify.malignant_set(entry.malignant, ds.label_set)
    index = build_index(build_retrieval_pool(ds))
    test = ds.split_records("test")
    if not test:
        raise ValidationError(f"dataset '{source}': empty test split")

    sweep_ks = tuple(range(1, SWEEP_MAX + 1)) if config.k_sweep else ()
    all_ks = tuple(sorted(set(config.k_list) | set(sweep_ks)))
    k_max = all_ks[-1]
    if k_max > len(index):
        raise ValidationError(
            f"k={k_max} exceeds the retrieval pool size {len(index)}"
        )

    workers = resolve_workers(workers)
    query_ids = tuple(r.image_id for r in test)
    truth = tuple(r.label for r in test)
    malignant_truth = np.array([lbl in malignant for lbl in truth], dtype=bool)
    ranked = batch_top_k(
        index, [r.vector for r in test], k_max, query_ids=query_ids, workers=workers
    )
    label_map = index.label_map

    predictions: dict[int, tuple[str, ...]] = {}
    malignancy: dict[int, np.ndarray] = {}
    accuracy_by_k: dict[int, float] = {}
    for k in all_ks:
        views = [r.truncate(k) for r in ranked]
        preds = tuple(classify.cbir_top1(v, label_map) for v in views)
        accuracy_by_k[k] = metrics.multiclass_accuracy(preds, truth)
        if k in config.k_list:
            predictions[k] = preds
            malignancy[k] = np.array(
                [classify.cbir_malignancy(v, label_map, malignant) for v in views]
            )

    soft_preds = tuple(softmax_top1(softmax, qid) for qid in query_ids)
    soft_mal = np.array(
        [
            classify.softmax_malignancy(softmax.row(qid), softmax.classes, malignant)
            for qid in query_ids
        ]
    )

    def cbir_cell(k: int) -> tuple[MetricRecord, RocAnalysis, float]:
        scores = malignancy[k]
        roc = metrics.roc_auc(scores, malignant_truth)
        op = {c: metrics.operating_point(scores, malignant_truth, c) for c in CUTOFFS}
        ci = _auc_ci(scores, malignant_truth, config.replicates, _cell_seed(config.seed, k))
        views = [r.truncate(k) for r in ranked]
        dists = [classify.cbir_distribution(v, label_map) for v in views]
        mav = metrics.mean_average_precision(dists, truth, ds.label_set)
        p = stats.delong_compare(scores, soft_mal, malignant_truth).p_value
        record = MetricRecord(
            map_value=mav.value,
            map_per_class=mav.per_class,
            map_skipped=mav.skipped,
            accuracy=accuracy_by_k[k],
            sens_25=op[0.25].sensitivity,
            spec_25=op[0.25].specificity,
            sens_50=op[0.5].sensitivity,
            spec_50=op[0.5].specificity,
            auc=roc.auc,
            auc_low=ci.low,
            auc_high=ci.high,
            p_value=p,
        )
        return record, roc, p

    per_k = _map_jobs(cbir_cell, list(config.k_list), workers)
    raw_p = [p for _, _, p in per_k]
    adjusted = stats.holm_adjust(raw_p)
    flags = stats.holm_not_evaluated(raw_p)

    soft_roc = metrics.roc_auc(soft_mal, malignant_truth)
    soft_op = {c: metrics.operating_point(soft_mal, malignant_truth, c) for c in CUTOFFS}
    soft_ci = _auc_ci(soft_mal, malignant_truth, config.replicates, _cell_seed(config.seed, 0))
    soft_dists = [
        classify.softmax_distribution(softmax.row(qid), softmax.classes)
        for qid in query_ids
    ]
    soft_map = metrics.mean_average_precision(soft_dists, truth, ds.label_set)
    soft_record = MetricRecord(
        map_value=soft_map.value,
        map_per_class=soft_map.per_class,
        map_skipped=soft_map.skipped,
        accuracy=metrics.multiclass_accuracy(soft_preds, truth),
        sens_25=soft_op[0.25].sensitivity,
        spec_25=soft_op[0.25].specificity,
        sens_50=soft_op[0.5].sensitivity,
        spec_50=soft_op[0.5].specificity,
        auc=soft_roc.auc,
        auc_low=soft_ci.low,
        auc_high=soft_ci.high,
    )

    cells = {}
    roc_curves: dict[str, RocAnalysis] = {}
    for i, k in enumerate(config.k_list):
        record, roc, _ = per_k[i]
        cells[(source, source, source, k)] = dataclasses.replace(
            record, p_adjusted=float(adjusted[i]), not_evaluated=bool(flags[i])
        )
        roc_curves[f"cbir@{k}"] = roc
    roc_curves["softmax"] = soft_roc

    detail = QueryDetail(
        source=source,
        query_ids=query_ids,
        truth=truth,
        malignant_truth=malignant_truth,
        predictions=predictions,
        malignancy=malignancy,
        softmax_predictions=soft_preds,
        softmax_malignancy=soft_mal,
        accuracy_by_k=accuracy_by_k,
        roc=roc_curves,
    )
    return ExperimentGrid(
        kind="intra",
        k_list=config.k_list,
        cells=cells,
        softmax_cells={(source, source): soft_record},
        details={source: detail},
    )


def softmax_top1(table: SoftmaxTable, image_id: str) -> str:
    return classify.softmax_top1(table.row(image_id), table.classes)


def _dedupe(items) -> tuple[str, ...]:
    return tuple(dict.fromkeys(items))


def run_cross(config: ExperimentConfig, workers: int | None = None) -> ExperimentGrid:
    """mAP over the full (network x test source x retrieval source x k) grid.

    Embedding files are keyed by (network, dataset): the same images yield
    different features under differently trained networks, so every pair in
    the cross product must be configured explicitly.  The mAP class universe
    is the label set actually present in each test truth.
    """
    if not config.embeddings:
        raise ValidationError("cross run needs an 'embeddings' section")
    by_pair = {(e.network, e.dataset): e for e in config.embeddings}
    networks = _dedupe(e.network for e in config.embeddings)
    dataset_names = _dedupe(e.dataset for e in config.embeddings)
    for net in networks:
        for name in dataset_names:
            if (net, name) not in by_pair:
                raise ValidationError(
                    f"missing embedding entry for network '{net}' on dataset '{name}'"
                )

    loaded: dict[tuple[str, str], Dataset] = {
        pair: load_manifest(entry.manifest) for pair, entry in by_pair.items()
    }
    indexes = {
        pair: build_index(build_retrieval_pool(ds)) for pair, ds in loaded.items()
    }
    workers = resolve_workers(workers)
    k_max = config.k_list[-1]

    triples = [
        (net, test_name, cbir_name)
        for net in networks
        for test_name in dataset_names
        for cbir_name in dataset_names
    ]

    def cross_cell(triple):
        net, test_name, cbir_name = triple
        test_ds = loaded[(net, test_name)]
        test = test_ds.split_records("test")
        if not test:
            raise ValidationError(
                f"embedding ({net}, {test_name}): empty test split"
            )
        index = indexes[(net, cbir_name)]
        if test_ds.dimension != index.dimension:
            raise ValidationError(
                f"dimensionality mismatch: ({net}, {test_name}) is "
                f"{test_ds.dimension}-wide, retrieval index ({net}, {cbir_name}) "
                f"is {index.dimension}-wide"
            )
        if k_max > len(index):
            raise ValidationError(
                f"k={k_max} exceeds the ({net}, {cbir_name}) pool size {len(index)}"
            )
        truth = tuple(r.label for r in test)
        universe = _dedupe(truth)
        ranked = batch_top_k(
            index,
            [r.vector for r in test],
            k_max,
            query_ids=[r.image_id for r in test],
            workers=1,          # parallelism lives at the cell level here
        )
        label_map = index.label_map
        out = {}
        for k in config.k_list:
            dists = [classify.cbir_distribution(r.truncate(k), label_map) for r in ranked]
            out[k] = metrics.mean_average_precision(dists, truth, universe)
        return out

    cell_maps = _map_jobs(cross_cell, triples, workers)

    softmax_cells: dict[tuple[str, str], MetricRecord] = {}
    for net in networks:
        for test_name in dataset_names:
            entry = by_pair[(net, test_name)]
            if entry.softmax is None:
                raise ValidationError(
                    f"embedding ({net}, {test_name}): cross run needs its softmax table"
                )
            test_ds = loaded[(net, test_name)]
            table = load_softmax(entry.softmax, test_ds)
            test = test_ds.split_records("test")
            truth = tuple(r.label for r in test)
            dists = [
                classify.softmax_distribution(table.row(r.image_id), table.classes)
                for r in test
            ]
            mav = metrics.mean_average_precision(dists, truth, _dedupe(truth))
            softmax_cells[(net, test_name)] = MetricRecord(
                map_value=mav.value,
                map_per_class=mav.per_class,
                map_skipped=mav.skipped,
            )

    cells = {}
    for triple, per_k in zip(triples, cell_maps):
        net, test_name, cbir_name = triple
        for k in config.k_list:
            mav: MapResult = per_k[k]
            cells[(net, test_name, cbir_name, k)] = MetricRecord(
                map_value=mav.value,
                map_per_class=mav.per_class,
                map_skipped=mav.skipped,
            )
    return ExperimentGrid(
        kind="cross", k_list=config.k_list, cells=cells, softmax_cells=softmax_cells
    )


@dataclass(frozen=True)
class SimilarityRow:
    query_id: str
    label: str
    n_same: int
    n_diff: int
    mean_same: float
    mean_diff: float


@dataclass(frozen=True)
class SubgroupTest:
    label: str
    n: int
    test: str
    statistic: float
    p_value: float
    p_adjusted: float | None
    not_evaluated: bool
    mean_same: float
    mean_diff: float


@dataclass(frozen=True)
class SimilarityReport:
    retrieval_source: str
    test_source: str
    rows: tuple[SimilarityRow, ...]
    overall: SubgroupTest
    per_class: tuple[SubgroupTest, ...]
    dropped: Mapping[str, int]


def similarity_report(config: ExperimentConfig, workers: int | None = None) -> SimilarityReport:
    """Mean cosine of each test query to same-label vs different-label pool images.

    Per class, the paired differences (same minus different) feed the
    normality-gated location test; Holm correction runs across the class
    subgroups.  The pooled all-query test is reported unadjusted alongside.
    Queries whose label has no pool representative have no paired value and
    are dropped (the count is reported per label).
    """
    pool_entry = _dataset_for(config, config.retrieval_source)
    test_entry = _dataset_for(config, config.test_source)
    pool_ds = load_manifest(pool_entry.manifest)
    test_ds = (
        pool_ds
        if test_entry.manifest == pool_entry.manifest
        else load_manifest(test_entry.manifest)
    )
    index = build_index(build_retrieval_pool(pool_ds))
    if len(set(index.labels)) < 2:
        raise ValidationError(
            f"retrieval pool '{config.retrieval_source}' has a single label; "
            "same-vs-different comparison is undefined"
        )
    test = test_ds.split_records("test")
    if not test:
        raise ValidationError(f"dataset '{config.test_source}': empty test split")
    if test_ds.dimension != index.dimension:
        raise ValidationError(
            f"dimensionality mismatch: test '{config.test_source}' is "
            f"{test_ds.dimension}-wide, pool '{config.retrieval_source}' is "
            f"{index.dimension}-wide"
        )

    # cosine of every query against the whole pool, via the index fast path
    ranked = batch_top_k(
        index,
        [r.vector for r in test],
        len(index),
        query_ids=[r.image_id for r in test],
        workers=resolve_workers(workers),
    )
    pool_labels = np.array(index.labels)
    position = {img: i for i, img in enumerate(index.image_ids)}

    rows: list[SimilarityRow] = []
    dropped: dict[str, int] = {}
    for rec, result in zip(test, ranked):
        sims = np.empty(len(index), dtype=np.float64)
        for img, sim in result.neighbors:
            sims[position[img]] = sim
        same = pool_labels == rec.label
        if not same.any():
            dropped[rec.label] = dropped.get(rec.label, 0) + 1
            continue
        rows.append(
            SimilarityRow(
                query_id=rec.image_id,
                label=rec.label,
                n_same=int(same.sum()),
                n_diff=int(len(index) - same.sum()),
                mean_same=float(sims[same].mean()),
                mean_diff=float(sims[~same].mean()),
            )
        )
    if not rows:
        raise ValidationError("every query was dropped; no report to build")

    def subgroup(label: str, members: list[SimilarityRow]) -> SubgroupTest:
        diffs = np.array([r.mean_same - r.mean_diff for r in members])
        result = stats.paired_test(diffs)
        return SubgroupTest(
            label=label,
            n=result.n,
            test=result.test,
            statistic=result.statistic,
            p_value=result.p_value,
            p_adjusted=None,
            not_evaluated=False,
            mean_same=float(np.mean([r.mean_same for r in members])),
            mean_diff=float(np.mean([r.mean_diff for r in members])),
        )

    labels = [lbl for lbl in test_ds.label_set if any(r.label == lbl for r in rows)]
    per_class = [subgroup(lbl, [r for r in rows if r.label == lbl]) for lbl in labels]
    adjusted = stats.holm_adjust([t.p_value for t in per_class])
    flags = stats.holm_not_evaluated([t.p_value for t in per_class])
    per_class = [
        dataclasses.replace(t, p_adjusted=float(adjusted[i]), not_evaluated=bool(flags[i]))
        for i, t in enumerate(per_class)
    ]
    return SimilarityReport(
        retrieval_source=config.retrieval_source,
        test_source=config.test_source,
        rows=tuple(rows),
        overall=subgroup("all", rows),
        per_class=tuple(per_class),
        dropped=dropped,
    )


# --- report emission -------------------------------------------------------


def _fmt3(x) -> str:
    return "" if x is None else f"{float(x):.3f}"


def _fmt_pct(x) -> str:
    return "" if x is None else f"{float(x):.1f}"


def _fmt_p(p, not_evaluated: bool = False) -> str:
    """Display form of a p-value; the floor applies to rendered tables only."""
    if not_evaluated:
        return "omitted"
    if p is None:
        return "-"
    return "<0.001" if p < 0.001 else f"{float(p):.3f}"


def _jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        def flat(key):
            if isinstance(key, tuple):
                return "/".join(str(p) for p in key)
            return str(key)
        return {flat(key): _jsonable(value) for key, value in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, frozenset):
        return sorted(obj)
    return obj


def _prepare_output(out_dir: Path, force: bool) -> Path:
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        if not force:
            raise ValidationError(
                f"output directory {out_dir} already has contents; pass --force to overwrite"
            )
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _write_predictions(out_dir: Path, detail: QueryDetail, k_list) -> Path:
    header = ["image_id", "truth", "malignant_truth"]
    for k in k_list:
        header += [f"pred_k{k}", f"malignancy_k{k}"]
    header += ["pred_softmax", "malignancy_softmax"]
    rows = []
    for i, qid in enumerate(detail.query_ids):
        row = [qid, detail.truth[i], "true" if detail.malignant_truth[i] else "false"]
        for k in k_list:
            row += [detail.predictions[k][i], repr(float(detail.malignancy[k][i]))]
        row += [
            detail.softmax_predictions[i],
            repr(float(detail.softmax_malignancy[i])),
        ]
        rows.append(row)
    return _write_csv(out_dir / f"predictions_{detail.source}.csv", header, rows)


def _audit_predictions(path: Path, grid: ExperimentGrid, detail: QueryDetail) -> None:
    """Recompute accuracies from the written per-image file; any drift is fatal."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    source = detail.source
    truth = [row["truth"] for row in rows]
    for k in grid.k_list:
        again = metrics.multiclass_accuracy([row[f"pred_k{k}"] for row in rows], truth)
        stored = grid.cells[(source, source, source, k)].accuracy
        if again != stored:
            raise RuntimeError(
                f"self-audit failed: accuracy k={k} recomputes to {again!r}, "
                f"table says {stored!r}"
            )
    again = metrics.multiclass_accuracy([row["pred_softmax"] for row in rows], truth)
    stored = grid.softmax_cells[(source, source)].accuracy
    if again != stored:
        raise RuntimeError(
            f"self-audit failed: softmax accuracy recomputes to {again!r}, "
            f"table says {stored!r}"
        )


def _emit_intra(out_dir: Path, grid: ExperimentGrid, paths: list[Path]) -> None:
    header = [
        "dataset", "predictor", "accuracy",
        "sens_at_25", "spec_at_25", "sens_at_50", "spec_at_50",
        "auc", "p_value", "p_value_adj",
    ]
    rows = []
    roc_rows = []
    acc_rows = []
    for source, detail in grid.details.items():
        for k in grid.k_list:
            cell = grid.cells[(source, source, source, k)]
            rows.append([
                source, f"CBIR-{k}", _fmt3(cell.accuracy),
                _fmt_pct(cell.sens_25), _fmt_pct(cell.spec_25),
                _fmt_pct(cell.sens_50), _fmt_pct(cell.spec_50),
                f"{_fmt3(cell.auc)} ({_fmt3(cell.auc_low)}-{_fmt3(cell.auc_high)})",
                _fmt_p(cell.p_value),
                _fmt_p(cell.p_adjusted, cell.not_evaluated),
            ])
        soft = grid.softmax_cells[(source, source)]
        rows.append([
            source, "Softmax", _fmt3(soft.accuracy),
            _fmt_pct(soft.sens_25), _fmt_pct(soft.spec_25),
            _fmt_pct(soft.sens_50), _fmt_pct(soft.spec_50),
            f"{_fmt3(soft.auc)} ({_fmt3(soft.auc_low)}-{_fmt3(soft.auc_high)})",
            "-", "-",
        ])
        for name, roc in detail.roc.items():
            for threshold, sens, spec in roc.points():
                roc_rows.append([
                    source, name, repr(float(threshold)),
                    repr(float(sens)), repr(float(spec)),
                ])
        soft_acc = grid.softmax_cells[(source, source)].accuracy
        for k in sorted(detail.accuracy_by_k):
            acc_rows.append([
                source, k, _fmt3(detail.accuracy_by_k[k]), _fmt3(soft_acc),
            ])
        paths.append(_write_predictions(out_dir, detail, grid.k_list))
        _audit_predictions(paths[-1], grid, detail)

    paths.append(_write_csv(out_dir / "table2.csv", header, rows))
    with open(out_dir / "table2.json", "w") as fh:
        json.dump(_jsonable({
            "k_list": grid.k_list,
            "cells": grid.cells,
            "softmax": grid.softmax_cells,
        }), fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths.append(out_dir / "table2.json")
    paths.append(_write_csv(
        out_dir / "roc_points.csv",
        ["source", "predictor", "threshold", "sensitivity", "specificity"],
        roc_rows,
    ))
    paths.append(_write_csv(
        out_dir / "accuracy_vs_k.csv",
        ["source", "k", "cbir_accuracy", "softmax_accuracy"],
        acc_rows,
    ))


def _emit_cross(out_dir: Path, grid: ExperimentGrid, paths: list[Path]) -> None:
    header = ["train", "test", "cbir"]
    header += [f"cbir_{k}" for k in grid.k_list]
    header += ["softmax"]    # one value per (train, test), denormalized per row
    rows = []
    for key in grid.cells:
        train, test, cbir, k = key
        if k != grid.k_list[0]:
            continue
        soft = grid.softmax_cells[(train, test)]
        rows.append(
            [train, test, cbir]
            + [_fmt3(grid.cells[(train, test, cbir, kk)].map_value) for kk in grid.k_list]
            + [_fmt3(soft.map_value)]
        )
    paths.append(_write_csv(out_dir / "table3.csv", header, rows))


def _emit_similarity(out_dir: Path, report: SimilarityReport, paths: list[Path]) -> None:
    rows = [
        [r.query_id, r.label, r.n_same, r.n_diff, _fmt3(r.mean_same), _fmt3(r.mean_diff)]
        for r in report.rows
    ]
    paths.append(_write_csv(
        out_dir / "similarity_pairs.csv",
        ["query_id", "label", "n_same", "n_diff", "mean_same", "mean_diff"],
        rows,
    ))


def emit_similarity_report(out_dir, report: SimilarityReport, force: bool = False) -> list[Path]:
    """Standalone emission for the similarity report: pairs CSV, JSON, figure."""
    out_dir = _prepare_output(Path(out_dir), force)
    paths: list[Path] = []
    _emit_similarity(out_dir, report, paths)
    with open(out_dir / "similarity_report.json", "w") as fh:
        json.dump(_jsonable(report), fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths.append(out_dir / "similarity_report.json")
    from . import figures
    paths.append(figures.similarity_pairs(out_dir / "similarity_pairs.png", report))
    return paths


def emit_reports(
    out_dir,
    intra: ExperimentGrid | None = None,
    cross: ExperimentGrid | None = None,
    similarity: SimilarityReport | None = None,
    force: bool = False,
) -> list[Path]:
    """Write every table, data file, figure and the raw JSON for a finished run.

    Refuses a non-empty output directory unless ``force``; runs the
    prediction-file self-audit for intra grids before returning.
    """
    out_dir = _prepare_output(Path(out_dir), force)
    paths: list[Path] = []
    if intra is not None:
        _emit_intra(out_dir, intra, paths)
    if cross is not None:
        _emit_cross(out_dir, cross, paths)
    if similarity is not None:
        _emit_similarity(out_dir, similarity, paths)

    with open(out_dir / "results.json", "w") as fh:
        json.dump(_jsonable({
            "intra": intra,
            "cross": cross,
            "similarity": similarity,
        }), fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths.append(out_dir / "results.json")

    from . import figures
    if intra is not None:
        for source, detail in intra.details.items():
            soft_acc = intra.softmax_cells[(source, source)].accuracy
            paths.append(figures.accuracy_vs_k(
                out_dir / "accuracy_vs_k.png", source, detail.accuracy_by_k, soft_acc
            ))
            paths.append(figures.roc_curves(out_dir / f"roc_{source}.png", source, detail.roc))
    if cross is not None:
        paths.append(figures.map_grid(out_dir / "map_grid.png", cross))
    if similarity is not None:
        paths.append(figures.similarity_pairs(out_dir / "similarity_pairs.png", similarity))
    return paths
