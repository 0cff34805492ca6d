"""Exact top-k cosine similarity search over a retrieval pool.

Vectors are stored unit-normalized in float32; similarity scores are
accumulated in float64 (a blocked dense matrix product) so results are
reproducible across platforms at the 1e-6 tolerances the tests use.  Search
is exact: no approximate structure, no recall confound.  Ties are broken by
ascending pool position, i.e. manifest order, which makes every ranking
auditable and repeat runs byte-identical.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datasets import RetrievalPool
from .errors import ValidationError

# queries per matrix-product block; fixed so chunk boundaries (and therefore
# float accumulation) never depend on the worker count
_QUERY_BLOCK = 256

THREADS_ENV = "CBIR_DX_THREADS"


@dataclass(frozen=True)
class RetrievalResult:
    """Ranked neighbor list for one query: (image_id, similarity) pairs."""

    query_id: str
    neighbors: tuple[tuple[str, float], ...]

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(nid for nid, _ in self.neighbors)

    @property
    def similarities(self) -> tuple[float, ...]:
        return tuple(sim for _, sim in self.neighbors)

    def truncate(self, k: int) -> "RetrievalResult":
        """First k neighbors; valid because rankings for smaller k are prefixes."""
        if not 1 <= k <= len(self.neighbors):
            raise ValidationError(f"cannot truncate {len(self.neighbors)} neighbors to k={k}")
        return RetrievalResult(self.query_id, self.neighbors[:k])


class NormalizedIndex:
    """Immutable matrix of unit vectors plus parallel id/lesion/label arrays."""

    def __init__(self, matrix: np.ndarray, image_ids, lesion_ids, labels, source=""):
        self.matrix = matrix
        self.image_ids = tuple(image_ids)
        self.lesion_ids = tuple(lesion_ids)
        self.labels = tuple(labels)
        self.source = source
        self.matrix.setflags(write=False)
        self._matrix64 = None

    def __len__(self) -> int:
        return self.matrix.shape[0]

    @property
    def dimension(self) -> int:
        return self.matrix.shape[1]

    @property
    def label_map(self) -> dict[str, str]:
        return dict(zip(self.image_ids, self.labels))

    def _scores(self, queries32: np.ndarray) -> np.ndarray:
        # float32 inputs, float64 accumulation; cache the widened pool matrix
        if self._matrix64 is None:
            self._matrix64 = self.matrix.astype(np.float64)
            self._matrix64.setflags(write=False)
        scores = queries32.astype(np.float64) @ self._matrix64.T
        np.clip(scores, -1.0, 1.0, out=scores)
        return scores


def _normalize32(vector, what: str) -> np.ndarray:
    vec = np.asarray(vector, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(vec)):
        raise ValidationError(f"non-finite value in {what}")
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise ValidationError(f"zero norm: {what}")
    return (vec / norm).astype(np.float32)


def build_index(pool: RetrievalPool) -> NormalizedIndex:
    """Normalize and freeze the pool, preserving manifest order for tie-breaks."""
    if len(pool) == 0:
        raise ValidationError("cannot index an empty pool")
    vectors = np.stack([rec.vector for rec in pool.records]).astype(np.float64)
    norms = np.linalg.norm(vectors, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ValidationError(
            f"zero norm: image_id '{pool.records[int(zero[0])].image_id}'"
        )
    matrix = (vectors / norms[:, None]).astype(np.float32)
    return NormalizedIndex(
        matrix=matrix,
        image_ids=[rec.image_id for rec in pool.records],
        lesion_ids=[rec.lesion_id for rec in pool.records],
        labels=[rec.label for rec in pool.records],
        source=pool.source,
    )


def cosine(a, b) -> float:
    """dot(a, b) / (|a| |b|), clamped into [-1, 1] against rounding."""
    va = np.asarray(a, dtype=np.float64).reshape(-1)
    vb = np.asarray(b, dtype=np.float64).reshape(-1)
    if va.shape != vb.shape:
        raise ValidationError(
            f"length mismatch: {va.shape[0]} vs {vb.shape[0]}"
        )
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise ValidationError("zero norm: cosine undefined for a zero vector")
    return float(np.clip(float(va @ vb) / (na * nb), -1.0, 1.0))


def _check_k(k: int, pool_size: int) -> int:
    k = int(k)
    if k < 1:
        # voting over zero neighbors is undefined downstream
        raise ValidationError(f"k must be >= 1, got {k}")
    if k > pool_size:
        raise ValidationError(f"k={k} exceeds pool size {pool_size}")
    return k


def _rank_rows(index: NormalizedIndex, queries32: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    scores = index._scores(queries32)
    # stable sort on descending score == tie-break by ascending pool position
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    top = np.take_along_axis(scores, order, axis=1)
    return order, top


def top_k(index: NormalizedIndex, query, k: int, query_id: str = "") -> RetrievalResult:
    """The k most similar pool entries, exactly, most similar first."""
    k = _check_k(k, len(index))
    q32 = _normalize32(query, f"query '{query_id}'" if query_id else "query")
    if q32.shape[0] != index.dimension:
        raise ValidationError(
            f"length mismatch: query has {q32.shape[0]} values, index dimensionality "
            f"is {index.dimension}"
        )
    order, top = _rank_rows(index, q32[None, :], k)
    neighbors = tuple(
        (index.image_ids[int(j)], float(s)) for j, s in zip(order[0], top[0])
    )
    return RetrievalResult(query_id=query_id, neighbors=neighbors)


def batch_top_k(
    index: NormalizedIndex,
    queries: Sequence,
    k: int,
    query_ids: Sequence[str] | None = None,
    workers: int | None = None,
) -> list[RetrievalResult]:
    """top_k for every query, in query order.

    Queries are processed in fixed-size blocks; blocks may run on a thread
    pool (numpy releases the GIL inside the matrix product and the sort), but
    block boundaries are independent of the worker count, so results are
    byte-identical to sequential evaluation.
    """
    if query_ids is None:
        query_ids = [str(i) for i in range(len(queries))]
    if len(query_ids) != len(queries):
        raise ValidationError("query_ids and queries differ in length")
    if len(queries) == 0:
        return []
    k = _check_k(k, len(index))

    q32 = np.empty((len(queries), index.dimension), dtype=np.float32)
    for i, q in enumerate(queries):
        qi = _normalize32(q, f"query '{query_ids[i]}' (position {i})")
        if qi.shape[0] != index.dimension:
            raise ValidationError(
                f"length mismatch: query '{query_ids[i]}' (position {i}) has "
                f"{qi.shape[0]} values, index dimensionality is {index.dimension}"
            )
        q32[i] = qi

    workers = resolve_workers(workers)
    blocks = [(start, min(start + _QUERY_BLOCK, len(queries)))
              for start in range(0, len(queries), _QUERY_BLOCK)]

    def run_block(bounds):
        start, stop = bounds
        return _rank_rows(index, q32[start:stop], k)

    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            ranked = list(pool.map(run_block, blocks))
    else:
        ranked = [run_block(b) for b in blocks]

    results: list[RetrievalResult] = []
    for (start, stop), (order, top) in zip(blocks, ranked):
        for row in range(stop - start):
            neighbors = tuple(
                (index.image_ids[int(j)], float(s))
                for j, s in zip(order[row], top[row])
            )
            results.append(RetrievalResult(query_id=query_ids[start + row], neighbors=neighbors))
    return results


def resolve_workers(workers: int | None) -> int:
    """Explicit argument wins, then the CBIR_DX_THREADS environment bound, then 1."""
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValidationError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return 1
