"""Command line entry point (`cbir-dx`).

Verbs:
  validate   check a manifest (and optionally its softmax table), first
             violation printed, nonzero exit
  query      ranked neighbor table for one image as CSV on stdout
  predict    per-test-image predictions at a fixed k
  evaluate   single-source metrics at a fixed k (metrics.json + roc_points.csv)
  compare    DeLong comparison of paired score columns with Holm correction
  grid       full configured run: intra metrics, cross mAP, similarity, reports
  simreport  similarity report alone
  synth      generate synthetic dataset files, or run the oracle self-check

Exit codes: 0 success, 1 validation error (bad inputs or config), 2 runtime
error.  `CBIR_DX_THREADS` bounds worker parallelism wherever `--threads` is
not given explicitly.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import classify, experiment, metrics, stats, synth
from .datasets import RetrievalPool, build_retrieval_pool, load_manifest, load_softmax
from .errors import ValidationError
from .index import THREADS_ENV, batch_top_k, build_index, top_k


def _load(args):
    ds = load_manifest(args.dataset)
    table = load_softmax(args.softmax, ds) if getattr(args, "softmax", None) else None
    return ds, table


def _malignant(args, ds):
    if getattr(args, "malignant", None):
        return classify.malignant_set(
            [m for m in args.malignant.split(",") if m], ds.label_set
        )
    return classify.default_malignant_set(ds.label_set)


def _out_stream(args):
    if getattr(args, "out", None):
        return open(args.out, "w", newline="")
    return sys.stdout


def cmd_validate(args) -> int:
    ds, table = _load(args)
    n_test = len(ds.split_records("test"))
    print(
        f"ok: {ds.name}: {len(ds.records)} records, d={ds.dimension}, "
        f"{len(ds.label_set)} classes, {n_test} test"
    )
    if table is not None:
        print(f"ok: softmax table: {len(table.rows)} rows, {len(table.classes)} classes")
    return 0


def cmd_query(args) -> int:
    ds, _ = _load(args)
    try:
        rec = ds.record(args.query_id)
    except KeyError:
        raise ValidationError(
            f"unknown image_id '{args.query_id}' in dataset '{ds.name}'"
        ) from None
    pool = build_retrieval_pool(ds)
    if any(r.image_id == rec.image_id for r in pool.records):
        # querying a training image: it would match itself at similarity 1
        pool = RetrievalPool(
            source=pool.source,
            records=tuple(r for r in pool.records if r.image_id != rec.image_id),
            dimension=pool.dimension,
        )
        if not pool.records:
            raise ValidationError("retrieval pool is empty after removing the query")
    index = build_index(pool)
    result = top_k(index, rec.vector, args.k, query_id=rec.image_id)
    labels = index.label_map
    writer = csv.writer(sys.stdout)
    writer.writerow(["image_id", "label", "similarity"])
    for nid, sim in result.neighbors:
        writer.writerow([nid, labels[nid], repr(float(sim))])
    return 0


def cmd_predict(args) -> int:
    ds, table = _load(args)
    malignant = _malignant(args, ds)
    index = build_index(build_retrieval_pool(ds))
    test = ds.split_records("test")
    if not test:
        raise ValidationError(f"dataset '{ds.name}': empty test split")
    ranked = batch_top_k(
        index,
        [r.vector for r in test],
        args.k,
        query_ids=[r.image_id for r in test],
        workers=args.threads,
    )
    labels = index.label_map
    header = ["image_id", "truth", "cbir_pred"]
    header += [f"freq_{cls}" for cls in ds.label_set]
    header += ["cbir_malignancy"]
    if table is not None:
        header += ["softmax_pred", "softmax_malignancy"]
    stream = _out_stream(args)
    try:
        writer = csv.writer(stream)
        writer.writerow(header)
        for rec, result in zip(test, ranked):
            dist = classify.cbir_distribution(result, labels)
            row = [rec.image_id, rec.label, classify.cbir_top1(result, labels)]
            row += [repr(dist.score(cls)) for cls in ds.label_set]
            row += [repr(classify.cbir_malignancy(result, labels, malignant))]
            if table is not None:
                prow = table.row(rec.image_id)
                row += [
                    classify.softmax_top1(prow, table.classes),
                    repr(classify.softmax_malignancy(prow, table.classes, malignant)),
                ]
            writer.writerow(row)
    finally:
        if stream is not sys.stdout:
            stream.close()
    return 0


def _table2_fields(scores, preds, truth, malignant_truth) -> dict:
    roc = metrics.roc_auc(scores, malignant_truth)
    out = {"accuracy": metrics.multiclass_accuracy(preds, truth)}
    for cutoff, tag in ((0.25, "25"), (0.5, "50")):
        op = metrics.operating_point(scores, malignant_truth, cutoff)
        out[f"sens_at_{tag}"] = op.sensitivity
        out[f"spec_at_{tag}"] = op.specificity
    out["auc"] = roc.auc
    return out


def cmd_evaluate(args) -> int:
    ds, table = _load(args)
    malignant = _malignant(args, ds)
    index = build_index(build_retrieval_pool(ds))
    test = ds.split_records("test")
    if not test:
        raise ValidationError(f"dataset '{ds.name}': empty test split")
    ranked = batch_top_k(
        index,
        [r.vector for r in test],
        args.k,
        query_ids=[r.image_id for r in test],
        workers=args.threads,
    )
    labels = index.label_map
    truth = [r.label for r in test]
    malignant_truth = np.array([lbl in malignant for lbl in truth], dtype=bool)

    cbir_scores = np.array(
        [classify.cbir_malignancy(r, labels, malignant) for r in ranked]
    )
    cbir_preds = [classify.cbir_top1(r, labels) for r in ranked]
    doc = {
        "dataset": ds.name,
        "k": args.k,
        "malignant": sorted(malignant),
        "cbir": _table2_fields(cbir_scores, cbir_preds, truth, malignant_truth),
        "softmax": None,
    }
    curves = {f"cbir@{args.k}": metrics.roc_auc(cbir_scores, malignant_truth)}
    if table is not None:
        soft_scores = np.array(
            [
                classify.softmax_malignancy(table.row(r.image_id), table.classes, malignant)
                for r in test
            ]
        )
        soft_preds = [
            classify.softmax_top1(table.row(r.image_id), table.classes) for r in test
        ]
        doc["softmax"] = _table2_fields(soft_scores, soft_preds, truth, malignant_truth)
        curves["softmax"] = metrics.roc_auc(soft_scores, malignant_truth)

    out_dir = experiment._prepare_output(Path(args.out), args.force)
    with open(out_dir / "metrics.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    rows = [
        [ds.name, name, repr(float(t)), repr(float(sens)), repr(float(spec))]
        for name, roc in curves.items()
        for t, sens, spec in roc.points()
    ]
    with open(out_dir / "roc_points.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source", "predictor", "threshold", "sensitivity", "specificity"])
        writer.writerows(rows)
    print(out_dir / "metrics.json")
    print(out_dir / "roc_points.csv")
    return 0


def _read_score_csv(path) -> tuple[list[str], dict[str, list[float]]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or reader.fieldnames[0] != "image_id":
            raise ValidationError(f"{path}: first column must be 'image_id'")
        columns = list(reader.fieldnames[1:])
        if not columns:
            raise ValidationError(f"{path}: no score columns")
        rows = list(reader)
    ids = [row["image_id"] for row in rows]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"{path}: duplicate image_id rows")
    try:
        scores = {
            row["image_id"]: [float(row[c]) for c in columns] for row in rows
        }
    except (TypeError, ValueError):
        raise ValidationError(f"{path}: unparsable score value") from None
    return columns, scores


_TRUTHY = {"1": True, "true": True, "0": False, "false": False}


def _read_truth_csv(path) -> dict[str, bool]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or "image_id" not in reader.fieldnames or "truth" not in reader.fieldnames:
            raise ValidationError(f"{path}: need 'image_id' and 'truth' columns")
        out = {}
        for row in reader:
            try:
                out[row["image_id"]] = _TRUTHY[row["truth"].strip().lower()]
            except KeyError:
                raise ValidationError(
                    f"{path}: truth value '{row['truth']}' for '{row['image_id']}' "
                    "is not one of 1/0/true/false"
                ) from None
    return out


def cmd_compare(args) -> int:
    cols_a, scores_a = _read_score_csv(args.a)
    cols_b, scores_b = _read_score_csv(args.b)
    truth = _read_truth_csv(args.truth)
    ids = sorted(scores_a)
    if set(ids) != set(scores_b) or set(ids) != set(truth):
        raise ValidationError("the two score files and the truth file must cover identical image ids")
    if cols_b != cols_a and len(cols_b) != 1:
        raise ValidationError(
            "score columns differ: give matching columns, or a single-column baseline"
        )
    t = np.array([truth[i] for i in ids], dtype=bool)
    results = []
    for j, col in enumerate(cols_a):
        a = np.array([scores_a[i][j] for i in ids])
        jb = j if cols_b == cols_a else 0
        b = np.array([scores_b[i][jb] for i in ids])
        results.append((col, stats.delong_compare(a, b, t)))
    adjusted = stats.holm_adjust([r.p_value for _, r in results])
    flags = stats.holm_not_evaluated([r.p_value for _, r in results])
    writer = csv.writer(sys.stdout)
    writer.writerow(["column", "auc_a", "auc_b", "z", "p_value", "p_adjusted", "not_evaluated"])
    for i, (col, r) in enumerate(results):
        writer.writerow([
            col, repr(r.auc_a), repr(r.auc_b), repr(r.z), repr(r.p_value),
            repr(float(adjusted[i])), "true" if flags[i] else "false",
        ])
    return 0


def _configured(args) -> experiment.ExperimentConfig:
    config = experiment.load_config(args.config)
    if getattr(args, "seed", None) is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if getattr(args, "out", None):
        config = dataclasses.replace(config, output=Path(args.out))
    if getattr(args, "k_sweep", False):
        config = dataclasses.replace(config, k_sweep=True)
    return config


def cmd_grid(args) -> int:
    config = _configured(args)
    intra = experiment.run_intra(config, workers=args.threads)
    cross = (
        experiment.run_cross(config, workers=args.threads)
        if config.embeddings
        else None
    )
    similarity = experiment.similarity_report(config, workers=args.threads)
    paths = experiment.emit_reports(
        config.output, intra=intra, cross=cross, similarity=similarity,
        force=args.force,
    )
    for path in paths:
        print(path)
    return 0


def cmd_simreport(args) -> int:
    config = _configured(args)
    report = experiment.similarity_report(config, workers=args.threads)
    for path in experiment.emit_similarity_report(config.output, report, force=args.force):
        print(path)
    return 0


def cmd_synth(args) -> int:
    if args.self_check:
        for name, count in synth.self_check():
            print(f"ok: {name}: {count} instances")
        return 0
    if not args.spec or not args.out:
        raise ValidationError("synth needs --spec and --out (or --self-check)")
    spec = synth.load_synth_spec(args.spec)
    manifest_path, softmax_path = synth.emit(spec, args.out)
    print(manifest_path)
    print(softmax_path)
    return 0


def _add_threads(p) -> None:
    p.add_argument(
        "--threads", type=int, default=None,
        help=f"worker threads (default: ${THREADS_ENV} or 1)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cbir-dx",
        description="Retrieval-based diagnosis evaluation over embedding datasets.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("validate", help="check dataset files, print the first violation")
    p.add_argument("--dataset", required=True, help="path to <name>.manifest.csv")
    p.add_argument("--softmax", help="optional softmax table to check against the dataset")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("query", help="ranked neighbors for one image, CSV on stdout")
    p.add_argument("--dataset", required=True)
    p.add_argument("--query-id", required=True)
    p.add_argument("--k", type=int, required=True)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("predict", help="per-test-image predictions at a fixed k")
    p.add_argument("--dataset", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--softmax", help="add softmax prediction columns")
    p.add_argument("--malignant", help="comma-separated malignant labels")
    p.add_argument("--out", help="write CSV here instead of stdout")
    _add_threads(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="single-source metrics at a fixed k")
    p.add_argument("--dataset", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--softmax", help="softmax table for the baseline row")
    p.add_argument("--malignant", help="comma-separated malignant labels")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    _add_threads(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="paired DeLong tests over score columns")
    p.add_argument("--a", required=True, help="CSV: image_id plus score columns")
    p.add_argument("--b", required=True, help="CSV: matching columns or one baseline column")
    p.add_argument("--truth", required=True, help="CSV: image_id,truth")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("grid", help="run the configured evaluation grid")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="override the configured output directory")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--k-sweep", action="store_true",
                   help="sweep accuracy over k=1..32 for the plot data")
    p.add_argument("--force", action="store_true")
    _add_threads(p)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("simreport", help="same-vs-different similarity report")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="override the configured output directory")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--force", action="store_true")
    _add_threads(p)
    p.set_defaults(func=cmd_simreport)

    p = sub.add_parser("synth", help="synthetic dataset generation and oracle checks")
    p.add_argument("--spec", help="YAML generation spec")
    p.add_argument("--out", help="output directory for the dataset files")
    p.add_argument("--self-check", action="store_true",
                   help="run the brute-force oracle battery instead")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        raise
    except Exception as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
