"""Embedding dataset ingest: manifests, vector payloads, softmax tables, splits.

A dataset on disk is a pair of files sharing a base name:

    <name>.manifest.csv   header: image_id,lesion_id,label,split,has_pathology
    <name>.vectors.f32    row-major little-endian float32, one d-wide row per
                          manifest record, in manifest order

plus an optional ``<name>.softmax.csv`` (image_id, then one column per class)
carrying per-image class probabilities from an external classifier.

Loading rejects rather than repairs: duplicate ids, leaky lesions (one lesion
spread over several splits), non-finite or zero-norm vectors, and probability
rows that do not sum to one all raise ValidationError.  A loaded Dataset is
immutable and safe to share between threads.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ValidationError

SPLITS = ("train", "valid", "test")

MANIFEST_SUFFIX = ".manifest.csv"
VECTORS_SUFFIX = ".vectors.f32"
SOFTMAX_SUFFIX = ".softmax.csv"

_MANIFEST_FIELDS = ("image_id", "lesion_id", "label", "split", "has_pathology")

_BOOL_TOKENS = {"true": True, "1": True, "false": False, "0": False}


@dataclass(frozen=True, eq=False)
class EmbeddingRecord:
    """One image: identity, diagnosis label, split membership, feature vector."""

    image_id: str
    lesion_id: str
    label: str
    split: str
    vector: np.ndarray
    has_pathology: bool = True

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=np.float32).reshape(-1)
        vec.setflags(write=False)
        object.__setattr__(self, "vector", vec)


@dataclass(frozen=True, eq=False)
class Dataset:
    """A named, validated collection of embedding records.

    ``label_set`` preserves first-appearance order from the manifest so that
    derived artifacts (class columns, report rows) are stable across runs.
    """

    name: str
    records: tuple[EmbeddingRecord, ...]
    label_set: tuple[str, ...] = field(default=())
    dimension: int = 0

    def __post_init__(self):
        records = tuple(self.records)
        if not records:
            raise ValidationError(f"dataset '{self.name}': empty dataset")
        dim = self.dimension or records[0].vector.shape[0]
        labels = self.label_set or tuple(dict.fromkeys(r.label for r in records))
        object.__setattr__(self, "records", records)
        object.__setattr__(self, "dimension", int(dim))
        object.__setattr__(self, "label_set", tuple(labels))
        _validate_records(self.name, records, self.dimension, self.label_set)

    def split_records(self, split: str) -> tuple[EmbeddingRecord, ...]:
        if split not in SPLITS:
            raise ValidationError(f"unknown split token '{split}'")
        return tuple(r for r in self.records if r.split == split)

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(r.image_id for r in self.records)

    def record(self, image_id: str) -> EmbeddingRecord:
        try:
            return self._by_id[image_id]
        except AttributeError:
            object.__setattr__(self, "_by_id", {r.image_id: r for r in self.records})
            return self._by_id[image_id]
        except KeyError:
            raise KeyError(f"dataset '{self.name}': no image_id '{image_id}'") from None


@dataclass(frozen=True)
class RetrievalPool:
    """Ordered candidate set for retrieval: exactly the train split, manifest order."""

    source: str
    records: tuple[EmbeddingRecord, ...]
    dimension: int

    def __len__(self) -> int:
        return len(self.records)


@dataclass(frozen=True, eq=False)
class SoftmaxTable:
    """Per-image class probability rows keyed by image_id."""

    classes: tuple[str, ...]
    rows: Mapping[str, np.ndarray]

    def row(self, image_id: str) -> np.ndarray:
        try:
            return self.rows[image_id]
        except KeyError:
            raise KeyError(f"no softmax row for image_id '{image_id}'") from None

    def score(self, image_id: str, cls: str) -> float:
        row = self.row(image_id)
        try:
            return float(row[self.classes.index(cls)])
        except ValueError:
            return 0.0


def _validate_records(name, records, dimension, label_set):
    seen_ids = set()
    lesion_split: dict[str, str] = {}
    known = set(label_set)
    for rec in records:
        if rec.split not in SPLITS:
            raise ValidationError(
                f"dataset '{name}': unknown split token '{rec.split}' (image_id '{rec.image_id}')"
            )
        if rec.image_id in seen_ids:
            raise ValidationError(f"dataset '{name}': duplicate image_id '{rec.image_id}'")
        seen_ids.add(rec.image_id)
        if rec.label not in known:
            raise ValidationError(
                f"dataset '{name}': label '{rec.label}' of image_id '{rec.image_id}' "
                f"not in label set {list(label_set)}"
            )
        prev = lesion_split.setdefault(rec.lesion_id, rec.split)
        if prev != rec.split:
            raise ValidationError(
                f"dataset '{name}': lesion leakage: lesion_id '{rec.lesion_id}' "
                f"appears in splits '{prev}' and '{rec.split}'"
            )
        if rec.vector.shape[0] != dimension:
            raise ValidationError(
                f"dataset '{name}': dimensionality mismatch: image_id '{rec.image_id}' "
                f"has {rec.vector.shape[0]} values, dataset dimensionality is {dimension}"
            )
        if not np.all(np.isfinite(rec.vector)):
            raise ValidationError(
                f"dataset '{name}': non-finite value in vector of image_id '{rec.image_id}'"
            )
        if not np.any(rec.vector):
            raise ValidationError(
                f"dataset '{name}': zero-norm vector for image_id '{rec.image_id}'"
            )
        if not rec.has_pathology and rec.split != "train":
            # unverified diagnoses may seed the retrieval pool but never the
            # evaluation splits
            raise ValidationError(
                f"dataset '{name}': image_id '{rec.image_id}' lacks a pathologic "
                f"diagnosis but sits in split '{rec.split}'"
            )


def _paths_for(manifest_path: Path) -> tuple[str, Path]:
    manifest_path = Path(manifest_path)
    if not manifest_path.name.endswith(MANIFEST_SUFFIX):
        raise ValidationError(
            f"manifest path must end with '{MANIFEST_SUFFIX}': {manifest_path}"
        )
    base = manifest_path.name[: -len(MANIFEST_SUFFIX)]
    return base, manifest_path.with_name(base + VECTORS_SUFFIX)


def load_manifest(path, expect_dim: int | None = None) -> Dataset:
    """Load ``<name>.manifest.csv`` plus its ``.vectors.f32`` sidecar.

    ``expect_dim`` pins the dimensionality; otherwise it is inferred from the
    payload size (which must divide evenly by the record count).
    """
    manifest_path = Path(path)
    name, vectors_path = _paths_for(manifest_path)
    if not manifest_path.is_file():
        raise ValidationError(f"missing manifest file: {manifest_path}")
    if not vectors_path.is_file():
        raise ValidationError(f"missing vector payload: {vectors_path}")

    rows = []
    with open(manifest_path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in _MANIFEST_FIELDS if c not in (reader.fieldnames or ())]
        if missing:
            raise ValidationError(
                f"manifest {manifest_path}: missing columns {missing}"
            )
        for row in reader:
            rows.append(row)
    if not rows:
        raise ValidationError(f"dataset '{name}': empty dataset")

    n = len(rows)
    payload = vectors_path.stat().st_size
    if payload % 4 != 0:
        raise ValidationError(
            f"dataset '{name}': dimensionality mismatch: payload of {payload} bytes "
            f"is not a whole number of float32 values"
        )
    total = payload // 4
    if expect_dim is not None:
        dim = int(expect_dim)
        if total != n * dim:
            raise ValidationError(
                f"dataset '{name}': dimensionality mismatch: expected {n}x{dim} "
                f"float32 values, payload holds {total}"
            )
    else:
        if total % n != 0:
            raise ValidationError(
                f"dataset '{name}': dimensionality mismatch: {total} float32 values "
                f"do not divide evenly over {n} records"
            )
        dim = total // n
    if dim < 1:
        raise ValidationError(f"dataset '{name}': dimensionality mismatch: d={dim}")

    matrix = np.fromfile(vectors_path, dtype="<f4").reshape(n, dim)

    records = []
    for i, row in enumerate(rows):
        token = str(row["has_pathology"]).strip().lower()
        if token not in _BOOL_TOKENS:
            raise ValidationError(
                f"dataset '{name}': bad has_pathology token '{row['has_pathology']}' "
                f"(image_id '{row['image_id']}')"
            )
        records.append(
            EmbeddingRecord(
                image_id=row["image_id"],
                lesion_id=row["lesion_id"],
                label=row["label"],
                split=row["split"],
                vector=matrix[i],
                has_pathology=_BOOL_TOKENS[token],
            )
        )
    return Dataset(name=name, records=tuple(records))


def write_manifest(ds: Dataset, directory, name: str | None = None) -> Path:
    """Write the manifest/vector pair for ``ds``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    name = name or ds.name
    manifest_path = directory / (name + MANIFEST_SUFFIX)
    vectors_path = directory / (name + VECTORS_SUFFIX)
    with open(manifest_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_MANIFEST_FIELDS)
        for rec in ds.records:
            writer.writerow(
                [
                    rec.image_id,
                    rec.lesion_id,
                    rec.label,
                    rec.split,
                    "true" if rec.has_pathology else "false",
                ]
            )
    matrix = np.stack([rec.vector for rec in ds.records]).astype("<f4")
    matrix.tofile(vectors_path)
    return manifest_path


def build_retrieval_pool(ds: Dataset) -> RetrievalPool:
    """The retrieval candidates are exactly the train split, in manifest order."""
    train = ds.split_records("train")
    if not train:
        raise ValidationError(f"dataset '{ds.name}': empty pool (no train records)")
    return RetrievalPool(source=ds.name, records=train, dimension=ds.dimension)


def load_softmax(path, ds: Dataset) -> SoftmaxTable:
    """Load ``<name>.softmax.csv`` and check it covers every test image of ``ds``.

    Each row must be a probability vector: entries in [0, 1], summing to 1
    within 1e-6.  The class list is whatever the header declares; it may be a
    strict subset of ``ds.label_set`` (a model that knows fewer classes).
    """
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"missing softmax table: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"softmax table {path}: empty file") from None
        if not header or header[0] != "image_id":
            raise ValidationError(
                f"softmax table {path}: first column must be 'image_id'"
            )
        classes = tuple(header[1:])
        if not classes:
            raise ValidationError(f"softmax table {path}: no class columns")
        rows: dict[str, np.ndarray] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            image_id = row[0]
            if image_id in rows:
                raise ValidationError(
                    f"softmax table {path}: duplicate row for image_id '{image_id}'"
                )
            if len(row) != len(classes) + 1:
                raise ValidationError(
                    f"softmax table {path}: line {lineno} has {len(row) - 1} values, "
                    f"expected {len(classes)}"
                )
            try:
                values = np.array([float(v) for v in row[1:]], dtype=np.float64)
            except ValueError:
                raise ValidationError(
                    f"softmax table {path}: unparsable value on line {lineno}"
                ) from None
            _check_probability_row(values, image_id, path)
            values.setflags(write=False)
            rows[image_id] = values
    for rec in ds.split_records("test"):
        if rec.image_id not in rows:
            raise ValidationError(
                f"softmax table {path}: missing prediction for test image "
                f"'{rec.image_id}'"
            )
    return SoftmaxTable(classes=classes, rows=rows)


def _check_probability_row(values: np.ndarray, image_id: str, origin) -> None:
    if not np.all(np.isfinite(values)):
        raise ValidationError(
            f"softmax table {origin}: non-finite probability for '{image_id}'"
        )
    if np.any(values < 0.0) or np.any(values > 1.0):
        raise ValidationError(
            f"softmax table {origin}: probability outside [0, 1] for '{image_id}'"
        )
    total = float(values.sum())
    if abs(total - 1.0) > 1e-6:
        raise ValidationError(
            f"softmax table {origin}: row for '{image_id}' not normalized "
            f"(sum={total!r})"
        )


def write_softmax(table: SoftmaxTable, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("image_id",) + table.classes)
        for image_id in table.rows:
            writer.writerow([image_id] + [repr(float(v)) for v in table.rows[image_id]])
    return path


def assign_splits(
    records: Sequence[EmbeddingRecord],
    seed: int,
    test_fraction: float = 0.2,
    valid_fraction: float = 0.2,
) -> tuple[EmbeddingRecord, ...]:
    """Stratified split utility for synthetic data.

    Whole lesions are assigned to a split (never individual images), stratified
    by label: per label, ``test_fraction`` of its lesions go to test, then
    ``valid_fraction`` of the remainder to valid, rest to train.  Upstream
    splits of real datasets arrive fixed in the manifest; this helper never
    touches them.
    """
    if not 0.0 <= test_fraction < 1.0 or not 0.0 <= valid_fraction < 1.0:
        raise ValidationError("split fractions must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    by_lesion: dict[str, list[EmbeddingRecord]] = {}
    for rec in records:
        by_lesion.setdefault(rec.lesion_id, []).append(rec)
    by_label: dict[str, list[str]] = {}
    for lesion_id, recs in by_lesion.items():
        by_label.setdefault(recs[0].label, []).append(lesion_id)

    assignment: dict[str, str] = {}
    for label in sorted(by_label):
        lesions = sorted(by_label[label])
        rng.shuffle(lesions)
        n = len(lesions)
        n_test = int(round(test_fraction * n))
        n_valid = int(round(valid_fraction * (n - n_test)))
        for i, lesion_id in enumerate(lesions):
            if i < n_test:
                assignment[lesion_id] = "test"
            elif i < n_test + n_valid:
                assignment[lesion_id] = "valid"
            else:
                assignment[lesion_id] = "train"

    return tuple(
        EmbeddingRecord(
            image_id=rec.image_id,
            lesion_id=rec.lesion_id,
            label=rec.label,
            split=assignment[rec.lesion_id],
            vector=rec.vector,
            has_pathology=rec.has_pathology,
        )
        for rec in records
    )
