"""Vector datasets: ingestion, normalization, the exact MIPS oracle and query splits.

On-disk vector files are little-endian: an 8-byte magic, ``n`` as u64, ``d`` as
u32, then ``n * d`` float32 values in row-major order. Ground-truth files use
an 8-byte magic, ``num_entries`` as u64, ``k`` as u32, followed by records of
``query_index`` (u64) and ``k`` item indices (u64 each).
"""

from __future__ import annotations

import logging
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

VECTOR_MAGIC = b"MIPSVEC1"
GT_MAGIC = b"MIPSGT01"
_VEC_HEADER = struct.Struct("<8sQI")
_GT_HEADER = struct.Struct("<8sQI")

SPLITS = ("train", "validation", "test")


class DatasetError(ValueError):
    """Raised for malformed or inconsistent vector data."""


@dataclass(frozen=True)
class Dataset:
    items: np.ndarray
    norm_scale: float = 1.0

    def __post_init__(self) -> None:
        items = np.asarray(self.items, dtype=np.float64)
        if items.ndim != 2 or items.shape[0] < 1 or items.shape[1] < 1:
            raise DatasetError("empty dataset")
        if not np.all(np.isfinite(items)):
            raise DatasetError("non-finite values in dataset")
        if not self.norm_scale > 0:
            raise DatasetError("norm_scale must be positive")
        items.setflags(write=False)
        object.__setattr__(self, "items", items)

    @property
    def n(self) -> int:
        return self.items.shape[0]

    @property
    def dim(self) -> int:
        return self.items.shape[1]

    def __len__(self) -> int:
        return self.n


@dataclass(frozen=True)
class QuerySet:
    queries: np.ndarray
    split: str = "train"

    def __post_init__(self) -> None:
        queries = np.asarray(self.queries, dtype=np.float64)
        if queries.ndim == 1:
            queries = queries.reshape(1, -1)
        if queries.ndim != 2:
            raise DatasetError("queries must be a 2-d array")
        if not np.all(np.isfinite(queries)):
            raise DatasetError("non-finite values in queries")
        if self.split not in SPLITS:
            raise DatasetError(f"unknown split {self.split!r}")
        queries.setflags(write=False)
        object.__setattr__(self, "queries", queries)

    @property
    def dim(self) -> int:
        return self.queries.shape[1]

    def __len__(self) -> int:
        return self.queries.shape[0]

    def subset(self, indices: Sequence[int], split: Optional[str] = None) -> "QuerySet":
        return QuerySet(self.queries[np.asarray(indices, dtype=np.int64)], split or self.split)


@dataclass(frozen=True)
class GroundTruthTable:
    """Per-query target item ids (best first), possibly for a subset of queries."""

    entries: Mapping[int, Tuple[int, ...]]
    num_queries: int
    n_items: int
    kind: str = "exact"
    k: int = field(default=0)

    def __post_init__(self) -> None:
        if self.kind not in ("exact", "approximate"):
            raise DatasetError(f"unknown ground-truth kind {self.kind!r}")
        clean: Dict[int, Tuple[int, ...]] = {}
        for qi, ids in sorted(self.entries.items()):
            ids = tuple(int(i) for i in ids)
            if not 0 <= qi < self.num_queries:
                raise DatasetError(f"query index {qi} out of range")
            if any(not 0 <= i < self.n_items for i in ids):
                raise DatasetError(f"item index out of range for query {qi}")
            if len(set(ids)) != len(ids):
                raise DatasetError(f"duplicate item ids for query {qi}")
            clean[int(qi)] = ids
        object.__setattr__(self, "entries", clean)
        if not self.k:
            object.__setattr__(self, "k", max((len(v) for v in clean.values()), default=0))

    @property
    def coverage(self) -> float:
        return len(self.entries) / self.num_queries if self.num_queries else 0.0

    def targets(self, query_index: int) -> Optional[Tuple[int, ...]]:
        return self.entries.get(query_index)

    def __contains__(self, query_index: int) -> bool:
        return query_index in self.entries

    def __len__(self) -> int:
        return len(self.entries)


def _check_rows(rows: Iterable[Sequence[float]]) -> np.ndarray:
    dim = None
    out = []
    for lineno, row in enumerate(rows, 1):
        if dim is None:
            dim = len(row)
        elif len(row) != dim:
            raise DatasetError(f"inconsistent dimension at record {lineno}: {len(row)} != {dim}")
        out.append(row)
    if not out or not dim:
        raise DatasetError("empty dataset")
    return np.asarray(out, dtype=np.float64)


def read_vectors(path: os.PathLike | str, format: str = "raw-f32") -> np.ndarray:
    """Read a matrix of vectors from a binary (``raw-f32``) or whitespace/comma text file."""
    if format == "text":
        rows = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                try:
                    rows.append([float(tok) for tok in line.replace(",", " ").split()])
                except ValueError as exc:
                    raise DatasetError(f"malformed record: {line[:40]!r}") from exc
        return _check_rows(rows)
    if format != "raw-f32":
        raise DatasetError(f"unknown format {format!r}")

    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob:
        raise DatasetError("empty dataset")
    if len(blob) < _VEC_HEADER.size:
        raise DatasetError("truncated header")
    magic, n, d = _VEC_HEADER.unpack_from(blob)
    if magic != VECTOR_MAGIC:
        raise DatasetError("bad magic in vector file")
    payload = blob[_VEC_HEADER.size:]
    if len(payload) != n * d * 4:
        raise DatasetError(f"payload holds {len(payload)} bytes, expected {n * d * 4}")
    if n == 0 or d == 0:
        raise DatasetError("empty dataset")
    return np.frombuffer(payload, dtype="<f4").reshape(n, d).astype(np.float64)


def write_vectors(path: os.PathLike | str, vectors: np.ndarray) -> None:
    vectors = np.asarray(vectors)
    if vectors.ndim != 2:
        raise DatasetError("expected a 2-d array")
    n, d = vectors.shape
    with open(path, "wb") as fh:
        fh.write(_VEC_HEADER.pack(VECTOR_MAGIC, n, d))
        fh.write(np.ascontiguousarray(vectors, dtype="<f4").tobytes())


def load_dataset(path: os.PathLike | str, format: str = "raw-f32") -> Dataset:
    return Dataset(read_vectors(path, format))


def load_queries(path: os.PathLike | str, split: str = "train", format: str = "raw-f32") -> QuerySet:
    return QuerySet(read_vectors(path, format), split)


def normalize(dataset: Dataset, queries: QuerySet) -> Tuple[Dataset, QuerySet]:
    """Scale items by their mean L2 norm and queries to unit length.

    Both are positive scalings, so the inner-product ranking of items for
    every query is preserved.
    """
    q_norms = np.linalg.norm(queries.queries, axis=1)
    if np.any(q_norms == 0):
        bad = int(np.flatnonzero(q_norms == 0)[0])
        raise DatasetError(f"zero-norm query at index {bad}")
    item_norms = np.linalg.norm(dataset.items, axis=1)
    zero_items = int(np.count_nonzero(item_norms == 0))
    if zero_items:
        logger.warning("%d zero-norm items kept in dataset", zero_items)
    scale = float(item_norms.mean())
    if scale == 0:
        raise DatasetError("all items have zero norm")
    items = dataset.items / scale
    return (
        Dataset(items, norm_scale=dataset.norm_scale * scale),
        QuerySet(queries.queries / q_norms[:, None], queries.split),
    )


def inner_product(a: Sequence[float], b: Sequence[float], budget=None) -> float:
    """Exact dot product; charges one unit to ``budget`` when one is given."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DatasetError(f"length mismatch: {a.shape} vs {b.shape}")
    if budget is not None:
        budget.charge(1)
    return float(np.dot(a, b))


def topk_order(scores: np.ndarray, k: Optional[int] = None) -> np.ndarray:
    """Indices of ``scores`` by descending value, ties broken by smaller index."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return order if k is None else order[:k]


def brute_force_topk(dataset: Dataset, q: Sequence[float], k: int) -> list:
    if k < 1 or k > dataset.n:
        raise DatasetError(f"k={k} must be in [1, {dataset.n}]")
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (dataset.dim,):
        raise DatasetError("query dimension does not match dataset")
    return topk_order(dataset.items @ q, k).tolist()


def split_indices(
    total: int, ratios: Tuple[float, float, float] = (0.8, 0.1, 0.1), seed: int = 0
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sorted train/validation/test index arrays for a seeded random split."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError(f"ratios {ratios} must be three non-negative values summing to 1")
    n_train = min(total, int(round(ratios[0] * total)))
    n_valid = min(total - n_train, int(round(ratios[1] * total)))
    perm = np.random.default_rng(seed).permutation(total)
    parts = (perm[:n_train], perm[n_train:n_train + n_valid], perm[n_train + n_valid:])
    return tuple(np.sort(p) for p in parts)


def split_queries(
    queries: QuerySet,
    ratios: Tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> Tuple[QuerySet, QuerySet, QuerySet]:
    parts = split_indices(len(queries), ratios, seed)
    return tuple(queries.subset(p, split) for p, split in zip(parts, SPLITS))


def save_ground_truth(path: os.PathLike | str, table: GroundTruthTable) -> None:
    k = table.k
    if any(len(v) != k for v in table.entries.values()):
        raise DatasetError("ground-truth file requires equal-length target lists")
    with open(path, "wb") as fh:
        fh.write(_GT_HEADER.pack(GT_MAGIC, len(table.entries), k))
        for qi, ids in table.entries.items():
            fh.write(struct.pack(f"<{k + 1}Q", qi, *ids))


def load_ground_truth(
    path: os.PathLike | str, num_queries: int, n_items: int, kind: str = "exact"
) -> GroundTruthTable:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _GT_HEADER.size:
        raise DatasetError("truncated ground-truth header")
    magic, count, k = _GT_HEADER.unpack_from(blob)
    if magic != GT_MAGIC:
        raise DatasetError("bad magic in ground-truth file")
    payload = blob[_GT_HEADER.size:]
    if len(payload) != 8 * count * (k + 1):
        raise DatasetError("ground-truth payload size mismatch")
    rec = np.frombuffer(payload, dtype="<u8")
    rec = rec.reshape(count, k + 1) if count else rec.reshape(0, k + 1)
    entries = {int(r[0]): tuple(int(x) for x in r[1:]) for r in rec}
    return GroundTruthTable(entries, num_queries=num_queries, n_items=n_items, kind=kind, k=k)


def synthetic(n: int, d: int, num_queries: int, seed: int = 0) -> Tuple[Dataset, QuerySet]:
    """Gaussian items with log-normal norm spread and Gaussian queries."""
    rng = np.random.default_rng(seed)
    items = rng.standard_normal((n, d))
    items *= np.exp(0.3 * rng.standard_normal(n))[:, None] / math.sqrt(d)
    return Dataset(items), QuerySet(rng.standard_normal((num_queries, d)), "train")
