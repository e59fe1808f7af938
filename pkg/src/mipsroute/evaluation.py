"""Recall metrics, ground-truth generation and experiment orchestration.

Reports are UTF-8 text with one ``key=value`` record per line, so they diff
cleanly and parse back to exactly the values that were written.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .agent import Agent, AgentParams, init_params, save_agent
from .proxgraph import (GraphConfig, ProximityGraph, SimilarityKind, build_graph, load_graph,
                        save_graph)
from .search import IpcBudget, Scorer, adjusted_budget, beam_search
from .training import RewardConfig, TrainConfig, train
from .vecstore import (Dataset, GroundTruthTable, QuerySet, brute_force_topk, load_dataset,
                       load_queries, normalize, split_queries, synthetic)

logger = logging.getLogger(__name__)

THREADS_ENV = "MIPSROUTE_THREADS"


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class RecallReport:
    M: int
    N: int
    value: float
    num_queries: int
    hits: int = 0
    total: int = 0
    skipped: int = 0
    ipc: Optional[float] = None


def _as_mapping(lists) -> Mapping[int, Sequence[int]]:
    if isinstance(lists, Mapping):
        return lists
    return dict(enumerate(lists))


def recall(returned, truth, M: int, N: int, ipc: Optional[float] = None) -> RecallReport:
    """Micro-averaged Recall M@N: hits of the true top-M inside the returned top-N.

    ``returned`` and ``truth`` are sequences or mappings keyed by query index.
    Queries returned without a truth entry are skipped and counted.
    """
    R = _as_mapping(returned)
    T = _as_mapping(truth)
    hits = total = skipped = 0
    for qi in R:
        if qi not in T:
            skipped += 1
    for qi, t in T.items():
        t_set = set(list(t)[:M])
        r_set = set(list(R.get(qi, ()))[:N])
        hits += len(t_set & r_set)
        total += len(t_set)
    if skipped:
        logger.warning("%d returned queries have no ground truth", skipped)
    value = hits / total if total else 0.0
    return RecallReport(M, N, value, len(T), hits, total, skipped, ipc)


def make_ground_truth(
    dataset: Dataset,
    queries: QuerySet,
    k: int,
    mode: str = "exact",
    fraction: float = 1.0,
    seed: int = 0,
    graph: Optional[ProximityGraph] = None,
    budget: Optional[int] = None,
) -> GroundTruthTable:
    """Top-``k`` targets for a seeded ``fraction`` of the queries.

    ``approximate`` mode takes the answer of a raw-score beam search on
    ``graph`` under ``budget`` IPC (unlimited when None) instead of the exact
    scan.
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    if mode not in ("exact", "approximate"):
        raise ValueError(f"unknown ground-truth mode {mode!r}")
    if mode == "approximate" and graph is None:
        raise ValueError("approximate ground truth needs a graph")
    nq = len(queries)
    count = int(round(fraction * nq))
    rng = np.random.default_rng(seed)
    covered = np.sort(rng.choice(nq, size=count, replace=False))
    entries = {}
    for qi in covered.tolist():
        q = queries.queries[qi]
        if mode == "exact":
            entries[qi] = tuple(brute_force_topk(dataset, q, k))
        else:
            res = beam_search(Scorer.raw(dataset.items, q), graph, k, IpcBudget(budget))
            entries[qi] = tuple(res.topk)
    return GroundTruthTable(entries, num_queries=nq, n_items=dataset.n, kind=mode, k=k)


def search_all(
    dataset: Dataset,
    graph: ProximityGraph,
    queries: np.ndarray,
    k: int,
    ipc: int,
    agent: Optional[Agent] = None,
    rerank_raw: bool = False,
    workers: int = 1,
) -> List[Tuple[List[int], int]]:
    """Run one beam search per query; returns ``(topk, ipc_used)`` pairs in query order."""
    limit = ipc
    if agent is not None and agent.params.query_linear:
        limit = adjusted_budget(ipc, agent.params.d, agent.params.d_embed)

    def one(q):
        scorer = agent.scorer(q) if agent is not None else Scorer.raw(dataset.items, q)
        rerank = Scorer.raw(dataset.items, q) if rerank_raw and agent is not None else None
        res = beam_search(scorer, graph, k, IpcBudget(limit), rerank=rerank)
        return res.topk, res.ipc_used

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, queries))
    return [one(q) for q in queries]


# --- reports --------------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def write_report(path: Union[str, Path], records: Iterable[Mapping]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(" ".join(f"{k}={_fmt(v)}" for k, v in rec.items()) + "\n")


def read_report(path: Union[str, Path]) -> List[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append({k: _parse_value(v) for k, v in (t.split("=", 1) for t in line.split(" "))})
    return out


# --- experiments ----------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    data: str = ""
    queries: str = ""
    data_format: str = "raw-f32"
    synthetic_n: int = 1000
    synthetic_d: int = 16
    synthetic_queries: int = 600
    data_seed: int = 0
    normalize: bool = True
    split_seed: int = 0
    graph: str = "ipnsw"
    graph_file: str = ""
    sim: str = "ip"
    M: int = 8
    N: int = 0
    graph_seed: int = 0
    scorer: str = "raw"
    rerank_raw: bool = False
    budgets: Tuple[int, ...] = (32, 64, 128)
    metrics: Tuple[str, ...] = ("1@1", "10@10")
    eval_split: str = "test"
    train: bool = False
    batches: int = 2000
    batch_size: int = 30
    lr: float = 1e-3
    tau: float = 0.15
    alpha: float = 0.7
    gamma: float = 0.9
    b: int = 4
    reward_mode: str = "full"
    collect_ipc: int = 64
    eval_every: int = 100
    d_embed: int = 0
    gt_kind: str = "exact"
    gt_fraction: float = 0.3
    gt_ipc: int = 256
    seeds: Tuple[int, ...] = (0,)
    throughput: bool = False

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "ExperimentConfig":
        kinds = {f.name: f for f in fields(cls)}
        kw = {}
        for key, raw in values.items():
            if key not in kinds:
                raise ValueError(f"unknown config key {key!r}")
            kw[key] = _coerce(raw, kinds[key].default)
        return cls(**kw)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "ExperimentConfig":
        values = {}
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected key=value")
                key, value = (s.strip() for s in line.split("=", 1))
                values[key] = value
        return cls.from_mapping(values)

    def replace(self, **changes) -> "ExperimentConfig":
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        for key, value in changes.items():
            if key not in data:
                raise ValueError(f"unknown config key {key!r}")
            data[key] = _coerce(value, data[key]) if isinstance(value, str) else value
        return ExperimentConfig(**data)


def _coerce(raw, like):
    if not isinstance(raw, str):
        return raw
    if isinstance(like, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, tuple):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        sample = like[0] if like else ""
        return tuple(type(sample)(s) if not isinstance(sample, str) else s for s in items)
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: Exception) -> None:
        super().__init__(f"[{stage}] {exc}")
        self.stage = stage


def _stage(name):
    def wrap(fn):
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except Exception as exc:
                raise StageError(name, exc) from exc
        return inner
    return wrap


@_stage("data")
def _prepare_data(cfg: ExperimentConfig):
    if cfg.data:
        ds = load_dataset(cfg.data, cfg.data_format)
        qs = load_queries(cfg.queries, "train", cfg.data_format)
    else:
        ds, qs = synthetic(cfg.synthetic_n, cfg.synthetic_d, cfg.synthetic_queries, cfg.data_seed)
    if cfg.normalize:
        ds, qs = normalize(ds, qs)
    train_q, valid_q, test_q = split_queries(qs, (0.8, 0.1, 0.1), cfg.split_seed)
    return ds, train_q, valid_q, test_q


@_stage("graph")
def _prepare_graph(cfg: ExperimentConfig, ds: Dataset) -> ProximityGraph:
    if cfg.graph_file:
        graph = load_graph(cfg.graph_file)
        if graph.n != ds.n:
            raise ValueError("graph size does not match dataset")
        return graph
    gcfg = GraphConfig(cfg.M, cfg.N or None, SimilarityKind(cfg.sim), cfg.graph_seed)
    return build_graph(cfg.graph, ds, gcfg)


@_stage("ground-truth")
def _prepare_gt(cfg: ExperimentConfig, ds: Dataset, train_q: QuerySet, graph: ProximityGraph,
                seed: int) -> Optional[GroundTruthTable]:
    if cfg.gt_kind == "none" or cfg.gt_fraction <= 0:
        return None
    ref_graph = graph
    if cfg.gt_kind == "approximate" and (cfg.graph != "ipnsw" or cfg.sim != "ip"):
        ref_graph = build_graph("ipnsw", ds, GraphConfig(cfg.M, cfg.N or None,
                                                          SimilarityKind.INNER_PRODUCT, cfg.graph_seed))
    # labels for every training query; the trainer draws its own labelled subset
    return make_ground_truth(ds, train_q, 1, cfg.gt_kind, 1.0, seed,
                             graph=ref_graph, budget=cfg.gt_ipc)


@_stage("train")
def _train(cfg: ExperimentConfig, ds, graph, train_q, valid_q, gt, seed: int) -> AgentParams:
    tcfg = TrainConfig(lr=cfg.lr, batch_size=cfg.batch_size, batches=cfg.batches,
                       gt_fraction=cfg.gt_fraction if gt is not None else 0.0,
                       collect_ipc=cfg.collect_ipc, eval_ipc=cfg.collect_ipc,
                       eval_every=cfg.eval_every, tau=cfg.tau, d_embed=cfg.d_embed or None,
                       seed=seed)
    rcfg = RewardConfig(cfg.alpha, cfg.gamma, cfg.b, cfg.reward_mode)
    return train(ds, graph, train_q, gt, tcfg, rcfg, validation=valid_q).params


def _parse_metric(text: str) -> Tuple[int, int]:
    m, n = text.split("@")
    return int(m), int(n)


@_stage("eval")
def _evaluate(cfg: ExperimentConfig, ds, graph, queries: QuerySet, agent: Optional[Agent],
              seed_label) -> List[dict]:
    metrics = [_parse_metric(m) for m in cfg.metrics]
    depth = max(max(m, n) for m, n in metrics)
    truth = [brute_force_topk(ds, q, min(depth, ds.n)) for q in queries.queries]
    records = []
    for budget in cfg.budgets:
        results = search_all(ds, graph, queries.queries, depth, budget, agent, cfg.rerank_raw,
                             worker_count())
        returned = [r for r, _ in results]
        mean_ipc = float(np.mean([u for _, u in results])) if results else 0.0
        for m, n in metrics:
            rep = recall(returned, truth, m, n)
            records.append({"name": cfg.name, "seed": seed_label, "graph": cfg.graph,
                            "scorer": cfg.scorer, "budget": budget, "metric": f"recall_{m}@{n}",
                            "value": rep.value, "num_queries": rep.num_queries,
                            "mean_ipc": mean_ipc})
    return records


def _throughput(ds, graph, queries: QuerySet, agent, budget: int, k: int) -> float:
    sample = queries.queries
    search_all(ds, graph, sample[: min(10, len(sample))], k, budget, agent)
    start = time.perf_counter()
    search_all(ds, graph, sample, k, budget, agent, workers=worker_count())
    elapsed = time.perf_counter() - start
    return len(sample) / elapsed if elapsed > 0 else float("inf")


def run_experiment(cfg: ExperimentConfig, out_dir: Union[str, Path]) -> List[dict]:
    """Build (or load) the graph, optionally train, and report recall per budget.

    Writes ``report.txt`` (machine-readable) and ``summary.txt`` into
    ``out_dir``; with ``throughput`` enabled a separate ``throughput.txt``
    holds the wall-clock numbers, which are not reproducible.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds, train_q, valid_q, test_q = _prepare_data(cfg)
    eval_q = {"test": test_q, "validation": valid_q, "train": train_q}[cfg.eval_split]
    graph = _prepare_graph(cfg, ds)
    save_graph(graph, out / "graph.bin")

    records: List[dict] = []
    timings: List[dict] = []
    agents: Dict[int, Optional[Agent]] = {}
    for seed in cfg.seeds:
        agent = None
        if cfg.scorer == "agent":
            if cfg.train:
                gt = _prepare_gt(cfg, ds, train_q, graph, seed)
                params = _train(cfg, ds, graph, train_q, valid_q, gt, seed)
                save_agent(params, out / f"agent_seed{seed}.bin")
            else:
                rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(3)[0])
                params = init_params(ds.dim, rng, cfg.d_embed or None, cfg.tau)
            agent = Agent(params, graph, ds.items)
        agents[seed] = agent
        records.extend(_evaluate(cfg, ds, graph, eval_q, agent, seed))
        if cfg.scorer == "raw":
            break
        if cfg.throughput:
            for budget in cfg.budgets:
                timings.append({"seed": seed, "budget": budget, "workers": worker_count(),
                                "qps": _throughput(ds, graph, eval_q, agent, budget, 10)})

    if len(cfg.seeds) > 1 and cfg.scorer == "agent":
        records.extend(_mean_records(records))
    write_report(out / "report.txt", records)
    _write_summary(out / "summary.txt", cfg, graph, records)
    if timings:
        write_report(out / "throughput.txt", timings)
    return records


def _mean_records(records: List[dict]) -> List[dict]:
    groups: Dict[Tuple, List[dict]] = {}
    for rec in records:
        groups.setdefault((rec["budget"], rec["metric"]), []).append(rec)
    out = []
    for (budget, metric), recs in groups.items():
        mean = dict(recs[0])
        mean["seed"] = "mean"
        mean["value"] = float(np.mean([r["value"] for r in recs]))
        mean["mean_ipc"] = float(np.mean([r["mean_ipc"] for r in recs]))
        out.append(mean)
    return out


def _write_summary(path: Path, cfg: ExperimentConfig, graph: ProximityGraph, records) -> None:
    lines = [f"experiment {cfg.name}",
             f"graph {cfg.graph} ({cfg.sim}) n={graph.n} edges={graph.num_edges} M={cfg.M}",
             f"scorer {cfg.scorer}" + (" (trained)" if cfg.train else ""), ""]
    lines.append(f"{'seed':>6} {'budget':>7} {'metric':>14} {'recall':>8} {'ipc':>8}")
    for r in records:
        lines.append(f"{str(r['seed']):>6} {r['budget']:>7} {r['metric']:>14} "
                     f"{r['value']:>8.4f} {r['mean_ipc']:>8.1f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def run_sweep(cfg: ExperimentConfig, key: str, values: Sequence[str],
              out_dir: Union[str, Path]) -> List[dict]:
    """Run one experiment per value of ``key``; collect all records in ``sweep.txt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for value in values:
        sub = cfg.replace(**{key: str(value)})
        for rec in run_experiment(sub, out / f"{key}={value}"):
            records.append({"sweep_key": key, "sweep_value": str(value), **rec})
    write_report(out / "sweep.txt", records)
    return records
