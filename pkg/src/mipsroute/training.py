"""Policy-gradient training of the routing agent.

Rewards are the inner-product gain of each move. For queries whose target
item is known the gain is shaped with the potential ``-alpha * L(s, v*)``,
where ``L`` is the hop distance to the target; the terminal state has
potential zero. Returns subtract a self-critic baseline (mean reward of ``b``
extra moves drawn from the same policy) and drive a REINFORCE update with Adam.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .agent import Agent, AgentParams, init_params, policy_log_prob_grad
from .proxgraph import ProximityGraph
from .search import IpcBudget, RoutingPath, beam_search, collect_path
from .vecstore import Dataset, GroundTruthTable, QuerySet, topk_order

logger = logging.getLogger(__name__)

UNREACHABLE = -1
REWARD_MODES = ("full", "shaping", "naive")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 0.7
    gamma: float = 0.9
    baseline_samples: int = 4
    mode: str = "full"

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.baseline_samples < 0:
            raise ValueError("baseline_samples must be >= 0")
        if self.mode not in REWARD_MODES:
            raise ValueError(f"mode must be one of {REWARD_MODES}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    decay_rate: float = 0.98
    decay_steps: int = 1000
    batch_size: int = 30
    batches: int = 2000
    gt_fraction: float = 0.3
    collect_ipc: int = 64
    eval_ipc: int = 64
    eval_every: int = 100
    tau: float = 0.15
    d_embed: Optional[int] = None
    query_linear: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.gt_fraction <= 1.0:
            raise ValueError("gt_fraction must lie in [0, 1]")
        if self.batch_size < 1 or self.batches < 0:
            raise ValueError("batch_size must be >= 1 and batches >= 0")


@dataclass
class ShortestPathTable:
    """Hop distances from every node to ``target``; ``-1`` marks unreachable nodes."""

    distances: np.ndarray
    target: int

    def __getitem__(self, v: int) -> int:
        return int(self.distances[v])

    def reachable(self, v: int) -> bool:
        return self.distances[v] != UNREACHABLE


def bfs_distances(graph: ProximityGraph, target: int) -> ShortestPathTable:
    """BFS over reversed edges, so distances are measured *towards* ``target``."""
    if not 0 <= target < graph.n:
        raise ValueError(f"target {target} out of range")
    incoming = graph.reverse() if graph.directed else graph.out_edges()
    dist = np.full(graph.n, UNREACHABLE, dtype=np.int64)
    dist[target] = 0
    queue = deque([target])
    while queue:
        v = queue.popleft()
        for u in incoming[v]:
            if dist[u] == UNREACHABLE:
                dist[u] = dist[v] + 1
                queue.append(u)
    return ShortestPathTable(dist, target)


def _reward(ips: np.ndarray, s: int, s_next: int, table: Optional[ShortestPathTable],
            terminal: bool, cfg: RewardConfig) -> float:
    gain = 0.0 if cfg.mode == "shaping" else float(ips[s_next] - ips[s])
    if table is None or cfg.mode == "naive" or not table.reachable(s):
        return gain
    if terminal:
        return gain + cfg.alpha * table[s]
    if not table.reachable(s_next):
        return gain
    return gain - cfg.alpha * (cfg.gamma * table[s_next] - table[s])


def step_reward(data, q: np.ndarray, s: int, s_next: int,
                table: Optional[ShortestPathTable] = None, terminal: bool = False,
                cfg: RewardConfig = RewardConfig()) -> float:
    """Reward of moving ``s -> s_next`` for query ``q``.

    Without a target this is the inner-product gain. With a target the gain is
    shaped by ``-alpha * (gamma * L(s') - L(s))``, or ``+alpha * L(s)`` when
    ``s_next`` ends the path. Steps touching a node that cannot reach the
    target fall back to the plain gain.
    """
    X = data.items if isinstance(data, Dataset) else np.asarray(data, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    ips = {s: float(X[s] @ q), s_next: float(X[s_next] @ q)}
    return _reward(ips, s, s_next, table, terminal, cfg)


def shaping_telescope_check(states: Sequence[int], table: ShortestPathTable,
                            alpha: float, gamma: float) -> float:
    """Discounted sum of the shaping terms along ``states``.

    Uses ``Phi(s) = -alpha * L(s)`` with the final state's potential fixed at
    zero, so the result must equal ``alpha * L(states[0])``.
    """
    if len(states) < 2:
        return 0.0
    if any(not table.reachable(s) for s in states[:-1]):
        raise ValueError("shaping potential is undefined for unreachable states")
    phi = [-alpha * table[s] for s in states[:-1]] + [0.0]
    return math.fsum(gamma ** t * (gamma * phi[t + 1] - phi[t]) for t in range(len(states) - 1))


@dataclass
class Trajectory:
    path: RoutingPath
    rewards: np.ndarray
    baselines: np.ndarray
    baseline_draws: List[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rewards)


def score_path(path: RoutingPath, ips: np.ndarray, table: Optional[ShortestPathTable],
               cfg: RewardConfig, rng: np.random.Generator) -> Trajectory:
    """Rewards for each move of ``path`` plus self-critic baselines.

    Baseline draws are taken with replacement from the probabilities recorded
    at each step and scored as ordinary (non-terminal) moves.
    """
    T = len(path)
    rewards = np.empty(T)
    baselines = np.zeros(T)
    draws: List[np.ndarray] = []
    for t, step in enumerate(path.steps):
        rewards[t] = _reward(ips, step.state, step.next_state, table, t == T - 1, cfg)
        if cfg.baseline_samples:
            cdf = np.cumsum(step.probs)
            picks = np.minimum(np.searchsorted(cdf, rng.random(cfg.baseline_samples) * cdf[-1],
                                               side="right"), len(cdf) - 1)
            alt = [_reward(ips, step.state, int(step.candidates[p]), table, False, cfg)
                   for p in picks]
            baselines[t] = math.fsum(alt) / len(alt)
            draws.append(picks)
    return Trajectory(path, rewards, baselines, draws)


def returns_with_baseline(rewards: np.ndarray, baselines: np.ndarray, gamma: float) -> np.ndarray:
    """``G_t = sum_{i >= t} gamma^(i - t) * (r_i - b_i)``, by reverse accumulation."""
    adv = np.asarray(rewards, dtype=np.float64) - np.asarray(baselines, dtype=np.float64)
    out = np.empty_like(adv)
    acc = 0.0
    for t in range(adv.size - 1, -1, -1):
        acc = adv[t] + gamma * acc
        out[t] = acc
    return out


class Adam:
    """Adam for gradient *ascent* with ``lr_k = lr * decay_rate ** (k / decay_steps)``."""

    def __init__(self, lr: float = 1e-3, decay_rate: float = 0.98, decay_steps: int = 1000,
                 betas=(0.9, 0.999), eps: float = 1e-8) -> None:
        self.lr = lr
        self.decay_rate = decay_rate
        self.decay_steps = decay_steps
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def current_lr(self) -> float:
        return self.lr * self.decay_rate ** (self.t / self.decay_steps)

    def step(self, weights: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        lr = self.current_lr()
        self.t += 1
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            m_hat = m / (1 - self.b1 ** self.t)
            v_hat = v / (1 - self.b2 ** self.t)
            weights[name] += lr * m_hat / (np.sqrt(v_hat) + self.eps)


def reinforce_update(agent: Agent, optimizer: Adam, batch: Sequence[tuple],
                     trajectories: Sequence[Trajectory], gamma: float) -> bool:
    """One ascent step on ``sum_t G_t * log pi(a_t | s_t)`` averaged over the batch.

    ``batch`` holds the query vectors matching ``trajectories``. Returns False
    (and leaves the parameters alone) when the gradient is not finite.
    """
    items = []
    scale = 1.0 / max(len(trajectories), 1)
    for q, traj in zip(batch, trajectories):
        G = returns_with_baseline(traj.rewards, traj.baselines, gamma)
        for step, g_t in zip(traj.path.steps, G):
            items.append((q, step.candidates, step.choice, g_t * scale))
    if not items:
        return True
    _, grads = policy_log_prob_grad(agent.encoder, agent.params, items)
    bad = [name for name, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        logger.warning("non-finite gradient in %s; batch skipped", ", ".join(bad))
        return False
    optimizer.step(agent.params.weights, grads)
    agent.refresh()
    return True


@dataclass
class TrainResult:
    params: AgentParams
    final_params: AgentParams
    history: List[dict]
    best_batch: int
    skipped_batches: int = 0


def agent_recall_at_1(agent: Agent, graph: ProximityGraph, queries: np.ndarray,
                      truth: Sequence[int], ipc: int) -> float:
    hits = 0
    for q, t in zip(queries, truth):
        res = beam_search(agent.scorer(q), graph, 1, IpcBudget(ipc))
        hits += int(res.topk[0] == t)
    return hits / len(truth) if len(truth) else 0.0


def train(
    dataset: Dataset,
    graph: ProximityGraph,
    queries: QuerySet,
    gt: Optional[GroundTruthTable],
    cfg: TrainConfig,
    reward_cfg: RewardConfig = RewardConfig(),
    validation: Optional[QuerySet] = None,
    init: Optional[AgentParams] = None,
) -> TrainResult:
    """Train a routing agent; returns the parameters with the best validation recall.

    Without validation queries the final parameters are returned. The label
    subset (``cfg.gt_fraction`` of training queries) is drawn from a separate
    random stream, so changing it does not perturb path sampling.
    """
    if len(queries) == 0:
        raise TrainingError("empty training set")
    X = dataset.items
    init_ss, run_ss, label_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    run_rng = np.random.default_rng(run_ss)
    params = init.copy() if init is not None else init_params(
        dataset.dim, np.random.default_rng(init_ss), cfg.d_embed, cfg.tau, cfg.query_linear)
    agent = Agent(params, graph, X)
    labelled = _pick_labelled(gt, len(queries), cfg.gt_fraction, np.random.default_rng(label_ss))
    tables: Dict[int, ShortestPathTable] = {}
    optimizer = Adam(cfg.lr, cfg.decay_rate, cfg.decay_steps)

    truth = None
    if validation is not None and len(validation):
        truth = [int(topk_order(X @ q, 1)[0]) for q in validation.queries]

    history: List[dict] = []
    best = (-1.0, 0, params.copy())

    def evaluate(batch_no: int) -> None:
        nonlocal best
        if truth is None:
            return
        r = agent_recall_at_1(agent, graph, validation.queries, truth, cfg.eval_ipc)
        history.append({"batch": batch_no, "val_recall": r, "lr": optimizer.current_lr()})
        if r > best[0]:
            best = (r, batch_no, agent.params.copy())

    evaluate(0)
    skipped = 0
    nq = len(queries)
    for b in range(1, cfg.batches + 1):
        picks = run_rng.choice(nq, size=min(cfg.batch_size, nq), replace=False)
        qs, trajs = [], []
        for qi in picks:
            q = queries.queries[qi]
            path = collect_path(agent.policy(q), graph, IpcBudget(cfg.collect_ipc), run_rng,
                                query_index=int(qi))
            table = None
            if int(qi) in labelled:
                target = labelled[int(qi)]
                if target not in tables:
                    tables[target] = bfs_distances(graph, target)
                table = tables[target]
            trajs.append(score_path(path, X @ q, table, reward_cfg, run_rng))
            qs.append(q)
        if not reinforce_update(agent, optimizer, qs, trajs, reward_cfg.gamma):
            skipped += 1
        if cfg.eval_every and b % cfg.eval_every == 0:
            evaluate(b)
    if truth is not None and (not cfg.eval_every or cfg.batches % cfg.eval_every):
        evaluate(cfg.batches)
    chosen = best[2] if truth is not None else agent.params.copy()
    return TrainResult(chosen, agent.params.copy(), history, best[1], skipped)


def _pick_labelled(gt: Optional[GroundTruthTable], nq: int, fraction: float,
                   rng: np.random.Generator) -> Dict[int, int]:
    """Map query index -> target vertex for the labelled subset of training queries."""
    if gt is None or fraction <= 0 or not len(gt):
        return {}
    available = sorted(qi for qi in gt.entries if qi < nq and gt.entries[qi])
    want = int(round(fraction * nq))
    if want > len(available):
        logger.warning("requested %d labelled queries, only %d have ground truth", want, len(available))
        want = len(available)
    chosen = rng.choice(len(available), size=want, replace=False) if want else []
    return {available[i]: gt.entries[available[i]][0] for i in sorted(chosen)}
