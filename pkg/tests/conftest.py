import numpy as np
import pytest

from cbir_dx.datasets import Dataset, EmbeddingRecord
from cbir_dx.synth import SynthSpec, generate


def record(image_id, label, split, vector, lesion_id=None, has_pathology=True):
    return EmbeddingRecord(
        image_id=image_id,
        lesion_id=lesion_id or f"L-{image_id}",
        label=label,
        split=split,
        vector=np.asarray(vector, dtype=np.float32),
        has_pathology=has_pathology,
    )


@pytest.fixture
def tiny_dataset():
    """Hand-sized 2-class dataset: 4 train, 1 valid, 2 test, d=4."""
    records = (
        record("t0", "mel", "train", [1.0, 0.0, 0.0, 0.0]),
        record("t1", "mel", "train", [0.9, 0.1, 0.0, 0.0]),
        record("t2", "nv", "train", [0.0, 1.0, 0.0, 0.0]),
        record("t3", "nv", "train", [0.0, 0.9, 0.1, 0.0]),
        record("v0", "nv", "valid", [0.1, 0.8, 0.1, 0.0]),
        record("q0", "mel", "test", [0.8, 0.0, 0.1, 0.0]),
        record("q1", "nv", "test", [0.1, 0.9, 0.0, 0.0]),
    )
    return Dataset(name="tiny", records=records)


@pytest.fixture
def cluster_spec():
    """Well-separated 3-class Gaussian spec, nonnegative features."""
    return SynthSpec(
        name="clusters",
        labels=("mel", "nv", "bkl"),
        means=np.array(
            [
                [3.0, 0.2, 0.2, 0.2, 0.2, 0.2],
                [0.2, 3.0, 0.2, 0.2, 0.2, 0.2],
                [0.2, 0.2, 3.0, 0.2, 0.2, 0.2],
            ]
        ),
        sigma=0.5,
        counts={"train": 30, "valid": 5, "test": 20},
        seed=17,
        nonnegative=True,
    )


@pytest.fixture
def cluster_pair(cluster_spec):
    return generate(cluster_spec)
