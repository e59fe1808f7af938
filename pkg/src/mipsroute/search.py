"""Budgeted routing on proximity graphs.

The only cost that counts is the number of inner products evaluated against
the query (IPC). Queue handling and visited-set bookkeeping are free.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from .proxgraph import ProximityGraph


class BudgetError(ValueError):
    pass


class StaleEmbeddingError(RuntimeError):
    """An embedding table was computed for a different graph or parameter set."""


class IpcBudget:
    """Counter of inner-product computations with an optional hard limit."""

    def __init__(self, limit: Optional[int] = None) -> None:
        if limit is not None and limit < 0:
            raise BudgetError("budget limit must be non-negative")
        self.limit = limit
        self.used = 0

    @classmethod
    def unlimited(cls) -> "IpcBudget":
        return cls(None)

    @property
    def remaining(self) -> float:
        return math.inf if self.limit is None else self.limit - self.used

    def exhausted(self) -> bool:
        return self.remaining <= 0

    def affordable(self, cost: int) -> int:
        """How many of ``cost`` units can still be paid for."""
        return cost if self.limit is None else max(0, min(cost, self.limit - self.used))

    def charge(self, cost: int = 1) -> None:
        if self.limit is not None and self.used + cost > self.limit:
            raise BudgetError(f"charge of {cost} exceeds remaining budget {self.remaining}")
        self.used += cost

    def __repr__(self) -> str:
        return f"IpcBudget(used={self.used}, limit={self.limit})"


def adjusted_budget(base_ipc: int, d: int, d_embed: int, identity: bool = False) -> int:
    """Search budget left after paying ``d_embed * d`` flops to embed the query.

    Budgets are compared in flops: ``base_ipc`` inner products of length ``d``
    against the cost of one mat-vec plus inner products of length ``d_embed``.
    """
    if d_embed < 1 or d < 1:
        raise BudgetError("dimensions must be positive")
    if identity:
        return base_ipc
    left = (base_ipc * d - d_embed * d) // d_embed
    if left <= 0:
        raise BudgetError("budget consumed by embedding")
    return int(left)


@dataclass
class Scorer:
    """Scores vertices against a query representation: ``<query_repr, vertex_repr[v]>``.

    ``kind`` is ``"raw"`` when ``vertex_repr`` are the dataset vectors and
    ``"agent"`` when they are precomputed vertex embeddings.
    """

    query_repr: np.ndarray
    vertex_repr: np.ndarray
    kind: str = "raw"

    def __call__(self, ids) -> np.ndarray:
        return self.vertex_repr[ids] @ self.query_repr

    @classmethod
    def raw(cls, data: np.ndarray, q: np.ndarray) -> "Scorer":
        return cls(np.asarray(q, dtype=np.float64), np.asarray(data, dtype=np.float64), "raw")


@dataclass
class SearchResult:
    topk: List[int]
    ipc_used: int
    visited: List[int]
    scores: List[float] = field(default_factory=list)

    @property
    def visited_count(self) -> int:
        return len(self.visited)


def beam_search(
    scorer: Scorer,
    graph: ProximityGraph,
    k: int,
    budget: IpcBudget,
    v0: Optional[int] = None,
    rerank: Optional[Scorer] = None,
) -> SearchResult:
    """Best-first expansion from ``v0`` returning the top ``k`` of all visited nodes.

    Each expansion pops the candidate with the highest score; all unvisited
    neighbours are scored (one IPC each) and queued. When the budget runs out
    mid-expansion the unscored neighbours are dropped. Equal scores resolve
    to the smaller vertex id. ``rerank``, when given, orders the visited set
    by a second scorer for the final answer; that pass is not charged.
    """
    if k < 1:
        raise BudgetError("k must be >= 1")
    start = graph.entry_vertex if v0 is None else int(v0)
    visited = [start]
    if budget.affordable(1) < 1:
        return SearchResult([start], budget.used, visited)
    budget.charge(1)
    score = {start: float(scorer([start])[0])}
    heap: List[Tuple[float, int]] = [(-score[start], start)]
    adj = graph.out_edges()
    while heap and not budget.exhausted():
        _, c = heapq.heappop(heap)
        fresh = [v for v in adj[c] if v not in score]
        if not fresh:
            continue
        paid = budget.affordable(len(fresh))
        fresh = fresh[:paid]
        budget.charge(paid)
        for v, s in zip(fresh, scorer(fresh)):
            s = float(s)
            score[v] = s
            visited.append(v)
            heapq.heappush(heap, (-s, v))
    final = score
    if rerank is not None:
        final = dict(zip(visited, (float(s) for s in rerank(visited))))
    ranked = sorted(visited, key=lambda v: (-final[v], v))[:k]
    return SearchResult(ranked, budget.used, visited, [final[v] for v in ranked])


@dataclass
class PathStep:
    state: int
    candidates: np.ndarray
    probs: np.ndarray
    choice: int

    @property
    def next_state(self) -> int:
        return int(self.candidates[self.choice])


@dataclass
class RoutingPath:
    start: int
    steps: List[PathStep]
    query_index: int = -1
    ipc_used: int = 0

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def states(self) -> List[int]:
        return [self.start] + [s.next_state for s in self.steps]


Policy = Callable[[np.ndarray], np.ndarray]


def collect_path(
    policy: Policy,
    graph: ProximityGraph,
    budget: IpcBudget,
    rng: np.random.Generator,
    v0: Optional[int] = None,
    query_index: int = -1,
) -> RoutingPath:
    """Walk the graph by sampling one unvisited neighbour per step.

    ``policy`` maps a candidate id array to a probability vector and costs one
    IPC per candidate. The whole candidate set is marked visited after each
    step, not only the chosen vertex. The walk ends when the current vertex has
    no unvisited neighbours or the budget cannot pay for scoring them.
    """
    from .agent import sample_action

    start = graph.entry_vertex if v0 is None else int(v0)
    visited = {start}
    steps: List[PathStep] = []
    v = start
    adj = graph.out_edges()
    while not budget.exhausted():
        cands = [w for w in adj[v] if w not in visited]
        if not cands or budget.affordable(len(cands)) < len(cands):
            break
        budget.charge(len(cands))
        cands = np.asarray(cands, dtype=np.int64)
        probs = policy(cands)
        choice = sample_action(probs, rng)
        steps.append(PathStep(v, cands, probs, choice))
        visited.update(cands.tolist())
        v = int(cands[choice])
    return RoutingPath(start, steps, query_index, budget.used)
