"""Proximity graphs for MIPS: ip-NSW (and its l2/cos variants), IPDG and Mobius.

Finished graphs are stored in CSR form (``offsets``/``targets``) and are
immutable. Builders work on plain adjacency lists and freeze at the end.

Graph file layout (all little-endian u64 unless noted)::

    magic[8] n directed max_degree candidate_size similarity seed(i64) entry checksum
    offsets[n + 1] targets[offsets[n]]
"""

from __future__ import annotations

import enum
import hashlib
import os
import struct
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from .vecstore import Dataset

GRAPH_MAGIC = b"MIPSGRF1"
_HEADER = struct.Struct("<8sQQQQQqQQ")


class GraphError(ValueError):
    pass


class SimilarityKind(enum.Enum):
    INNER_PRODUCT = "ip"
    NEGATIVE_L2 = "l2"
    COSINE = "cos"

    @property
    def code(self) -> int:
        return _SIM_CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "SimilarityKind":
        for kind, c in _SIM_CODES.items():
            if c == code:
                return kind
        raise GraphError(f"unknown similarity code {code}")


_SIM_CODES = {
    SimilarityKind.INNER_PRODUCT: 0,
    SimilarityKind.NEGATIVE_L2: 1,
    SimilarityKind.COSINE: 2,
}


def similarity(kind: SimilarityKind, points: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Score each row of ``points`` against ``q`` (larger is more similar)."""
    if kind is SimilarityKind.INNER_PRODUCT:
        return points @ q
    if kind is SimilarityKind.NEGATIVE_L2:
        return -np.linalg.norm(points - q, axis=-1)
    norms = np.linalg.norm(points, axis=-1) * np.linalg.norm(q)
    if np.any(norms == 0):
        raise GraphError("cosine similarity is undefined for zero vectors")
    return (points @ q) / norms


@dataclass(frozen=True)
class GraphConfig:
    max_degree: int = 16
    candidate_size: Optional[int] = None
    similarity: SimilarityKind = SimilarityKind.INNER_PRODUCT
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_degree < 1:
            raise GraphError("max_degree must be >= 1")
        if self.candidate_size is not None and self.candidate_size < self.max_degree:
            raise GraphError("candidate_size must be >= max_degree")

    @property
    def search_width(self) -> int:
        # default sub-search width for insertion when N is not given
        return self.candidate_size or 2 * self.max_degree


class ProximityGraph:
    """Immutable CSR adjacency with build metadata."""

    def __init__(
        self,
        offsets: np.ndarray,
        targets: np.ndarray,
        directed: bool,
        config: GraphConfig,
        entry_vertex: int = 0,
    ) -> None:
        offsets = np.ascontiguousarray(offsets, dtype=np.int64)
        targets = np.ascontiguousarray(targets, dtype=np.int64)
        n = offsets.size - 1
        if n < 1 or offsets[0] != 0 or offsets[-1] != targets.size or np.any(np.diff(offsets) < 0):
            raise GraphError("malformed CSR offsets")
        if targets.size and (targets.min() < 0 or targets.max() >= n):
            raise GraphError("neighbor id out of range")
        if not 0 <= entry_vertex < n:
            raise GraphError("entry vertex out of range")
        offsets.setflags(write=False)
        targets.setflags(write=False)
        self.offsets = offsets
        self.targets = targets
        self.directed = bool(directed)
        self.config = config
        self.entry_vertex = int(entry_vertex)
        self._checksum: Optional[int] = None
        self._lists: Optional[List[List[int]]] = None

    @classmethod
    def from_lists(cls, adj: Sequence[Sequence[int]], directed: bool, config: GraphConfig,
                   entry_vertex: int = 0) -> "ProximityGraph":
        offsets = np.zeros(len(adj) + 1, dtype=np.int64)
        offsets[1:] = np.cumsum([len(a) for a in adj])
        targets = np.fromiter((v for a in adj for v in a), dtype=np.int64, count=int(offsets[-1]))
        return cls(offsets, targets, directed, config, entry_vertex)

    @property
    def n(self) -> int:
        return self.offsets.size - 1

    @property
    def num_edges(self) -> int:
        return self.targets.size

    def neighbors(self, v: int) -> np.ndarray:
        return self.targets[self.offsets[v]:self.offsets[v + 1]]

    def out_edges(self) -> List[List[int]]:
        if self._lists is None:
            self._lists = [self.neighbors(v).tolist() for v in range(self.n)]
        return self._lists

    def out_degrees(self) -> np.ndarray:
        return np.diff(self.offsets)

    def reverse(self) -> List[List[int]]:
        rev: List[List[int]] = [[] for _ in range(self.n)]
        for u, nbrs in enumerate(self.out_edges()):
            for w in nbrs:
                rev[w].append(u)
        return rev

    def reachable_from(self, v0: Optional[int] = None) -> np.ndarray:
        seen = np.zeros(self.n, dtype=bool)
        start = self.entry_vertex if v0 is None else v0
        seen[start] = True
        stack = [start]
        adj = self.out_edges()
        while stack:
            u = stack.pop()
            for w in adj[u]:
                if not seen[w]:
                    seen[w] = True
                    stack.append(w)
        return seen

    def _header_fields(self):
        cfg = self.config
        return (GRAPH_MAGIC, self.n, int(self.directed), cfg.max_degree, cfg.candidate_size or 0,
                cfg.similarity.code, cfg.seed, self.entry_vertex)

    @property
    def checksum(self) -> int:
        if self._checksum is None:
            h = hashlib.blake2b(digest_size=8)
            h.update(struct.pack("<8sQQQQQqQ", *self._header_fields()))
            h.update(self.offsets.astype("<u8").tobytes())
            h.update(self.targets.astype("<u8").tobytes())
            self._checksum = int.from_bytes(h.digest(), "little")
        return self._checksum

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ProximityGraph):
            return NotImplemented
        return (self.directed == other.directed and self.config == other.config
                and self.entry_vertex == other.entry_vertex
                and np.array_equal(self.offsets, other.offsets)
                and np.array_equal(self.targets, other.targets))

    def __repr__(self) -> str:
        return (f"ProximityGraph(n={self.n}, edges={self.num_edges}, directed={self.directed}, "
                f"M={self.config.max_degree}, entry={self.entry_vertex})")


def save_graph(graph: ProximityGraph, path: os.PathLike | str) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(*graph._header_fields(), graph.checksum))
        fh.write(graph.offsets.astype("<u8").tobytes())
        fh.write(graph.targets.astype("<u8").tobytes())


def load_graph(path: os.PathLike | str) -> ProximityGraph:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise GraphError("truncated graph header")
    magic, n, directed, m, cand, sim, seed, entry, checksum = _HEADER.unpack_from(blob)
    if magic != GRAPH_MAGIC:
        raise GraphError("bad magic in graph file")
    pos = _HEADER.size
    need = (n + 1) * 8
    if len(blob) < pos + need:
        raise GraphError("truncated graph offsets")
    offsets = np.frombuffer(blob, dtype="<u8", count=n + 1, offset=pos).astype(np.int64)
    pos += need
    if len(blob) != pos + int(offsets[-1]) * 8:
        raise GraphError("graph payload size mismatch")
    targets = np.frombuffer(blob, dtype="<u8", offset=pos).astype(np.int64)
    config = GraphConfig(max_degree=m, candidate_size=cand or None,
                         similarity=SimilarityKind.from_code(sim), seed=seed)
    graph = ProximityGraph(offsets, targets, bool(directed), config, entry)
    if graph.checksum != checksum:
        raise GraphError("graph checksum mismatch")
    return graph


# --- search used during construction -------------------------------------------------


def _ranked(ids, scores: dict) -> List[int]:
    return sorted(ids, key=lambda v: (-scores[v], v))


def _greedy_search(
    adj: Sequence[Sequence[int]],
    score: Callable[[List[int]], np.ndarray],
    v0: int,
    N: int,
    k: int,
) -> List[int]:
    """Frontier search over adjacency lists.

    ``score`` maps a list of node ids to similarities with the query. Every
    round pulls in all unchecked neighbours of the current pool, truncates
    the pool to the best ``N`` and stops once the pool no longer changes.
    Nodes whose neighbours were already pulled in are not re-expanded since
    that cannot add anything.
    """
    scores = {v0: float(score([v0])[0])}
    pool = [v0]
    expanded = set()
    while True:
        fresh = []
        for u in pool:
            if u in expanded:
                continue
            expanded.add(u)
            for w in adj[u]:
                if w not in scores:
                    scores[w] = None
                    fresh.append(w)
        if not fresh:
            break
        for w, s in zip(fresh, score(fresh)):
            scores[w] = float(s)
        new_pool = _ranked(pool + fresh, scores)[:N]
        if new_pool == pool:
            break
        pool = new_pool
    return pool[:k]


def _scorer(points: np.ndarray, q: np.ndarray, kind: SimilarityKind):
    def score(ids):
        return similarity(kind, points[ids], q)
    return score


def greedy_search(
    graph: ProximityGraph,
    data: np.ndarray,
    q: np.ndarray,
    v0: int,
    N: int,
    k: int,
    similarity_kind: SimilarityKind = SimilarityKind.INNER_PRODUCT,
) -> List[int]:
    """Return up to ``k`` nodes best matching ``q``, found from ``v0``."""
    if not 0 <= v0 < graph.n:
        raise GraphError(f"start vertex {v0} out of range")
    data = _vectors(data)
    return _greedy_search(graph.out_edges(), _scorer(data, np.asarray(q, float), similarity_kind),
                          v0, N, k)


def _vectors(data) -> np.ndarray:
    return data.items if isinstance(data, Dataset) else np.asarray(data, dtype=np.float64)


# --- ip-NSW -------------------------------------------------------------------------


def build_ipnsw(dataset: Dataset, config: GraphConfig, protect_degree: int = 2,
                _insertions: Optional[list] = None) -> ProximityGraph:
    """Insert points in order, linking each to its best matches both ways.

    A node whose degree exceeds ``M`` keeps only its ``M`` most similar
    neighbours; dropped edges are removed in both directions so the graph
    stays undirected.

    Under inner product, small-norm points rank last for everybody and end up
    stripped of every edge. With ``protect_degree > 0`` a neighbour whose own
    degree is at most ``protect_degree`` is only dropped when no better-linked
    neighbour can be dropped instead. ``protect_degree=0`` is the plain
    top-``M`` rule.
    """
    X = _vectors(dataset)
    n = X.shape[0]
    M = config.max_degree
    kind = config.similarity
    if kind is SimilarityKind.COSINE and np.any(np.linalg.norm(X, axis=1) == 0):
        raise GraphError("cosine graph requires non-zero items")
    adj: List[List[int]] = [[] for _ in range(n)]
    for i in range(1, n):
        found = _greedy_search(adj, _scorer(X, X[i], kind), 0, config.search_width, M)
        if _insertions is not None:
            _insertions.append((i, list(found)))
        for y in found:
            adj[i].append(y)
            adj[y].append(i)
        for y in found:
            if len(adj[y]) <= M:
                continue
            sims = similarity(kind, X[adj[y]], X[y])
            worst_first = [adj[y][p] for p in np.argsort(-sims, kind="stable")[::-1]]
            excess = len(worst_first) - M
            spare = [z for z in worst_first if len(adj[z]) > protect_degree]
            fragile = [z for z in worst_first if len(adj[z]) <= protect_degree]
            drop = set((spare + fragile)[:excess])
            for z in drop:
                adj[z].remove(y)
            adj[y] = [z for z in reversed(worst_first) if z not in drop]
    return ProximityGraph.from_lists(adj, directed=False, config=config, entry_vertex=0)


# --- IPDG ---------------------------------------------------------------------------


def ipdg_select(candidates: Sequence[int], data, M: int) -> List[int]:
    """Keep ``y`` when ``<y, y>`` is at least ``<y, z>`` for every kept ``z``.

    ``candidates`` must already be ordered best first; the scan stops as soon
    as ``M`` nodes have been kept.
    """
    X = _vectors(data)
    kept: List[int] = []
    for y in candidates:
        if len(kept) >= M:
            break
        vy = X[y]
        if not kept or vy @ vy >= np.max(X[kept] @ vy):
            kept.append(y)
    return kept


def _ordered(ids, X: np.ndarray, q: np.ndarray, kind: SimilarityKind) -> List[int]:
    ids = list(dict.fromkeys(ids))
    if not ids:
        return ids
    sims = similarity(kind, X[ids], q)
    return [ids[p] for p in np.argsort(-sims, kind="stable")] if len(ids) > 1 else ids


def build_ipdg(dataset: Dataset, config: GraphConfig, rounds: int = 2,
               _snapshots: Optional[list] = None) -> ProximityGraph:
    """Two-round directed inner-product graph.

    In the refinement round a point already has out-edges; its new list is
    selected from the union of those and the fresh search candidates so the
    degree cap still holds.
    """
    X = _vectors(dataset)
    n = X.shape[0]
    M = config.max_degree
    N = config.search_width
    ip = SimilarityKind.INNER_PRODUCT
    rng = np.random.default_rng(config.seed)
    adj: List[List[int]] = [[] for _ in range(n)]
    for rnd in range(rounds):
        for i in range(n):
            present = i if rnd == 0 else n
            if present == 0:
                continue
            v0 = int(rng.integers(present))
            found = _greedy_search(adj, _scorer(X, X[i], ip), v0, N + 1, N + 1)
            pool = _ordered([v for v in found if v != i][:N] + adj[i], X, X[i], ip)
            adj[i] = ipdg_select(pool, X, M)
            for y in adj[i]:
                pool_y = _ordered(adj[y] + [i], X, X[y], ip)
                adj[y] = ipdg_select(pool_y, X, M)
        if _snapshots is not None:
            _snapshots.append([list(a) for a in adj])
    entry = int(rng.integers(n))
    cfg = GraphConfig(M, config.candidate_size, ip, config.seed)
    return ProximityGraph.from_lists(adj, directed=True, config=cfg, entry_vertex=entry)


# --- Mobius -------------------------------------------------------------------------


def mobius_transform(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    sq = np.einsum("ij,ij->i", X, X)
    if np.any(sq == 0):
        raise GraphError("Mobius transform is undefined for zero-norm items")
    return X / sq[:, None]


def distance_select(x: np.ndarray, candidates: Sequence[int], Y: np.ndarray, M: int) -> List[int]:
    """Occlusion-style pruning: keep ``y`` if ``x`` is no farther from it than any kept node."""
    ids = list(dict.fromkeys(candidates))
    if not ids:
        return []
    dist = np.linalg.norm(Y[ids] - x, axis=1)
    kept: List[int] = []
    for p in np.argsort(dist, kind="stable"):
        if len(kept) >= M:
            break
        y = ids[p]
        if not kept or dist[p] <= np.min(np.linalg.norm(Y[kept] - Y[y], axis=1)):
            kept.append(y)
    return kept


def build_mobius(dataset: Dataset, config: GraphConfig) -> ProximityGraph:
    X = _vectors(dataset)
    n = X.shape[0]
    M = config.max_degree
    if n <= M:
        raise GraphError(f"Mobius graph needs n > M (n={n}, M={M})")
    N = config.search_width
    Y = np.vstack([np.zeros((1, X.shape[1])), mobius_transform(X)])
    l2 = SimilarityKind.NEGATIVE_L2
    adj: List[List[int]] = [[] for _ in range(n + 1)]
    for u in range(M):
        adj[u] = [w for w in range(M) if w != u]
    for i in range(M, n + 1):
        found = _greedy_search(adj, _scorer(Y, Y[i], l2), 0, N, N)
        adj[i] = distance_select(Y[i], found, Y, M)
        for z in adj[i]:
            adj[z] = distance_select(Y[z], adj[z] + [i], Y, M)
    out = [[w - 1 for w in adj[u] if w != 0] for u in range(1, n + 1)]
    entry = _max_norm_vertex(X)
    cfg = GraphConfig(M, config.candidate_size, l2, config.seed)
    return ProximityGraph.from_lists(out, directed=True, config=cfg, entry_vertex=entry)


def _max_norm_vertex(X: np.ndarray) -> int:
    return int(np.argmax(np.linalg.norm(X, axis=1)))


BUILDERS = {"ipnsw": build_ipnsw, "ipdg": build_ipdg, "mobius": build_mobius}


def build_graph(algo: str, dataset: Dataset, config: GraphConfig) -> ProximityGraph:
    try:
        builder = BUILDERS[algo]
    except KeyError:
        raise GraphError(f"unknown graph algorithm {algo!r}") from None
    return builder(dataset, config)
