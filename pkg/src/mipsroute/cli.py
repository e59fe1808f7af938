"""Command-line front end: ``mipsroute <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .agent import Agent, load_agent, save_agent
from .evaluation import (ExperimentConfig, StageError, make_ground_truth, run_experiment, run_sweep,
                         search_all, write_report)
from .proxgraph import BUILDERS, GraphConfig, SimilarityKind, build_graph, load_graph, save_graph
from .training import RewardConfig, TrainConfig, train
from .vecstore import (Dataset, GroundTruthTable, QuerySet, load_dataset, load_ground_truth,
                       load_queries, normalize, read_vectors, save_ground_truth, split_indices,
                       split_queries, write_vectors)

log = logging.getLogger("mipsroute")


def _cmd_ingest(args) -> None:
    items = read_vectors(args.items, args.format)
    write_vectors(Path(args.out_dir) / "items.bin", items)
    msg = f"items: n={items.shape[0]} d={items.shape[1]}"
    if args.queries:
        queries = read_vectors(args.queries, args.format)
        if args.normalize:
            ds, qs = normalize(Dataset(items), QuerySet(queries))
            items, queries = ds.items, qs.queries
            write_vectors(Path(args.out_dir) / "items.bin", items)
        write_vectors(Path(args.out_dir) / "queries.bin", queries)
        msg += f" queries={queries.shape[0]}"
    print(msg)


def _cmd_build(args) -> None:
    ds = load_dataset(args.data)
    cfg = GraphConfig(args.M, args.N, SimilarityKind(args.sim), args.seed)
    graph = build_graph(args.algo, ds, cfg)
    save_graph(graph, args.out)
    reach = graph.reachable_from().mean()
    print(f"{args.algo}: n={graph.n} edges={graph.num_edges} reachable={reach:.4f}")


def _cmd_gt(args) -> None:
    ds = load_dataset(args.data)
    qs = load_queries(args.queries)
    graph = load_graph(args.graph) if args.graph else None
    table = make_ground_truth(ds, qs, args.k, args.mode, args.fraction, args.seed, graph, args.ipc)
    save_ground_truth(args.out, table)
    print(f"ground truth: {len(table)} of {len(qs)} queries, k={args.k}, {args.mode}")


def _cmd_train(args) -> None:
    ds = load_dataset(args.data)
    qs = load_queries(args.queries)
    graph = load_graph(args.graph)
    train_q, valid_q, _ = split_queries(qs, (0.8, 0.1, 0.1), args.split_seed)
    gt = None
    if args.gt:
        full = load_ground_truth(args.gt, len(qs), ds.n)
        # ground truth is indexed over the whole query file; re-key it to the training split
        train_idx = split_indices(len(qs), (0.8, 0.1, 0.1), args.split_seed)[0]
        idx = {int(orig): i for i, orig in enumerate(train_idx)}
        entries = {idx[qi]: t for qi, t in full.entries.items() if qi in idx}
        gt = GroundTruthTable(entries, len(train_q), ds.n, full.kind, full.k)
    tcfg = TrainConfig(lr=args.lr, batch_size=args.batch_size, batches=args.batches,
                       gt_fraction=args.gt_fraction if gt is not None else 0.0,
                       collect_ipc=args.ipc, eval_ipc=args.ipc, tau=args.tau,
                       d_embed=args.d_embed, seed=args.seed)
    rcfg = RewardConfig(args.alpha, args.gamma, args.b, args.reward_mode)
    res = train(ds, graph, train_q, gt, tcfg, rcfg, validation=valid_q)
    save_agent(res.params, args.out)
    if args.log:
        write_report(args.log, res.history)
    best = max((h["val_recall"] for h in res.history), default=float("nan"))
    print(f"trained {args.batches} batches; best validation recall@1={best:.4f} "
          f"at batch {res.best_batch}; skipped {res.skipped_batches}")


def _cmd_search(args) -> None:
    ds = load_dataset(args.data)
    qs = load_queries(args.queries)
    graph = load_graph(args.graph)
    if graph.n != ds.n:
        raise ValueError("graph size does not match dataset")
    agent = Agent(load_agent(args.agent), graph, ds.items) if args.agent else None
    results = search_all(ds, graph, qs.queries, args.k, args.ipc, agent, args.rerank)
    for qi, (ids, used) in enumerate(results):
        print(f"{qi}\t{used}\t" + " ".join(map(str, ids)))


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config)
    overrides = dict(s.split("=", 1) for s in args.set or [])
    if args.seed is not None:
        overrides["seeds"] = str(args.seed)
    return cfg.replace(**overrides) if overrides else cfg


def _cmd_eval(args) -> None:
    cfg = _load_config(args)
    records = run_experiment(cfg, args.out)
    print((Path(args.out) / "summary.txt").read_text(encoding="utf-8"), end="")
    log.info("%d report records written", len(records))


def _cmd_sweep(args) -> None:
    cfg = _load_config(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    records = run_sweep(cfg, args.key, values, args.out)
    for rec in records:
        print(f"{rec['sweep_key']}={rec['sweep_value']} seed={rec['seed']} budget={rec['budget']} "
              f"{rec['metric']}={rec['value']:.4f}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mipsroute", description="Learned routing for MIPS on graphs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--seed", type=int, default=None if name in ("eval", "sweep") else 0)
        sp.set_defaults(func=fn)
        return sp

    sp = add("ingest", _cmd_ingest, "convert vector files to the binary format")
    sp.add_argument("--items", required=True)
    sp.add_argument("--queries")
    sp.add_argument("--format", choices=("raw-f32", "text"), default="text")
    sp.add_argument("--normalize", action="store_true")
    sp.add_argument("--out-dir", required=True)

    sp = add("build", _cmd_build, "build a proximity graph")
    sp.add_argument("--data", required=True)
    sp.add_argument("--algo", choices=sorted(BUILDERS), default="ipnsw")
    sp.add_argument("--sim", choices=[k.value for k in SimilarityKind], default="ip")
    sp.add_argument("--M", type=int, default=16)
    sp.add_argument("--N", type=int, default=None)
    sp.add_argument("--out", required=True)

    sp = add("gt", _cmd_gt, "compute ground-truth targets")
    sp.add_argument("--data", required=True)
    sp.add_argument("--queries", required=True)
    sp.add_argument("--k", type=int, default=1)
    sp.add_argument("--mode", choices=("exact", "approximate"), default="exact")
    sp.add_argument("--graph")
    sp.add_argument("--ipc", type=int, default=None)
    sp.add_argument("--fraction", type=float, default=1.0)
    sp.add_argument("--out", required=True)

    sp = add("train", _cmd_train, "train a routing agent")
    sp.add_argument("--data", required=True)
    sp.add_argument("--queries", required=True)
    sp.add_argument("--graph", required=True)
    sp.add_argument("--gt")
    sp.add_argument("--gt-fraction", type=float, default=0.3)
    sp.add_argument("--split-seed", type=int, default=0)
    sp.add_argument("--batches", type=int, default=2000)
    sp.add_argument("--batch-size", type=int, default=30)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--tau", type=float, default=0.15)
    sp.add_argument("--alpha", type=float, default=0.7)
    sp.add_argument("--gamma", type=float, default=0.9)
    sp.add_argument("--b", type=int, default=4)
    sp.add_argument("--reward-mode", choices=("full", "shaping", "naive"), default="full")
    sp.add_argument("--ipc", type=int, default=64)
    sp.add_argument("--d-embed", type=int, default=None)
    sp.add_argument("--log", help="write per-interval validation recall here")
    sp.add_argument("--out", required=True)

    sp = add("search", _cmd_search, "answer queries with beam search")
    sp.add_argument("--data", required=True)
    sp.add_argument("--queries", required=True)
    sp.add_argument("--graph", required=True)
    sp.add_argument("--agent")
    sp.add_argument("--rerank", action="store_true", help="order visited nodes by raw score")
    sp.add_argument("--k", type=int, default=10)
    sp.add_argument("--ipc", type=int, default=64)

    for name, fn, help_ in (("eval", _cmd_eval, "run an experiment from a config file"),
                            ("sweep", _cmd_sweep, "run an experiment for several values of a key")):
        sp = add(name, fn, help_)
        sp.add_argument("--config", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE")
        if name == "sweep":
            sp.add_argument("--key", required=True)
            sp.add_argument("--values", required=True)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: [{args.command}] {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
