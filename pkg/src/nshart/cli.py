"""Command-line entry points: synth, train, eval, sample, trace-attention.

Exit codes: 0 success, 1 runtime failure (a JSON error object on stderr),
2 bad flags (argparse usage).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import Labeler, SynthConfig, generate_synthetic, load_dataset, save_dataset
from .evaluation import evaluate_split
from .kernels import derive_seed
from .training import Trainer, contexts, load_config, write_default_config

log = logging.getLogger("nshart")


def _query_json(query, lab: Labeler) -> dict:
    return {
        "pairs": [[lab.relation(p.role), None if p.entity < 0 else lab.entity(p.entity)] for p in query.pairs],
        "missing_index": query.missing_index,
        "answer": None if query.answer is None else lab.entity(query.answer),
    }


def subgraph_json(sub, graph, lab: Labeler) -> dict:
    edges = [{"local": 0, "edge": None, "pairs": _query_json(sub.query, lab)["pairs"]}]
    for i, e in enumerate(sub.edges, start=1):
        edge = graph.edges[int(e)]
        edges.append({"local": i, "edge": int(e),
                      "pairs": [[lab.relation(p.role), lab.entity(p.entity)] for p in edge.pairs]})
    nodes = [
        {"entity": lab.entity(int(v)), "distance": int(d), "member_edges": [int(x) for x in mem]}
        for v, d, mem in zip(sub.nodes, sub.hop_distance, sub.memberships)
    ]
    return {"query": _query_json(sub.query, lab), "seed": sub.seed, "K": sub.K,
            "target": None if sub.target is None else lab.entity(sub.target),
            "edges": edges, "nodes": nodes}


def _pick_query(bundle, split: str, index: int):
    queries = bundle.valid_queries if split == "valid" else bundle.test_queries
    if not 0 <= index < len(queries):
        raise IndexError(f"query index {index} out of range for {split} ({len(queries)} queries)")
    return queries[index]


def _write(path, text: str):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)


# -- subcommands ----------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = SynthConfig(noise=args.noise, seed=args.seed)
    bundle = generate_synthetic(cfg)
    save_dataset(bundle, args.out)
    print(json.dumps(bundle.manifest, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    overrides = dict(seed=args.seed, threads=args.threads, epochs=args.epochs, task=args.task)
    cfg = load_config(args.config, **overrides)
    bundle = load_dataset(args.data)
    trainer = Trainer(cfg, bundle.relation_count, bundle.feature_dim)
    log_fh = open(args.log, "w") if args.log else None
    try:
        def on_epoch(stats):
            if log_fh:
                log_fh.write(json.dumps(stats.to_json(), sort_keys=True) + "\n")
                log_fh.flush()

        trainer.fit(bundle, on_epoch=on_epoch)
    finally:
        if log_fh:
            log_fh.close()
    trainer.save(args.checkpoint)
    return 0


def cmd_eval(args) -> int:
    trainer = Trainer.load(args.checkpoint)
    if args.threads:
        trainer.config.threads = args.threads
    bundle = load_dataset(args.data)
    _, inf_ctx = contexts(bundle, trainer.config)
    queries = bundle.valid_queries if args.split == "valid" else bundle.test_queries
    report = evaluate_split(trainer, inf_ctx, queries, seed=args.seed)
    _write(args.out, report.dumps() + "\n")
    table = report.table()
    if args.table:
        _write(args.table, table + "\n")
    if args.ranks_csv:
        report.write_ranks_csv(args.ranks_csv)
    print(table)
    return 0


def cmd_sample(args) -> int:
    cfg = load_config(args.config, seed=args.seed)
    bundle = load_dataset(args.data)
    trainer = Trainer(cfg, bundle.relation_count, bundle.feature_dim)
    _, inf_ctx = contexts(bundle, cfg)
    query = _pick_query(bundle, args.split, args.query_index)
    seed = derive_seed(cfg.seed, args.query_index)
    if args.with_target:
        sub = trainer.pair_subgraph(inf_ctx.graph, query, query.answer, seed)
    else:
        sub = trainer.query_subgraph(inf_ctx.graph, query, seed)
    _write(args.out, json.dumps(subgraph_json(sub, inf_ctx.graph, Labeler(bundle)), indent=2) + "\n")
    return 0


def cmd_trace(args) -> int:
    trainer = Trainer.load(args.checkpoint)
    bundle = load_dataset(args.data)
    _, inf_ctx = contexts(bundle, trainer.config)
    query = _pick_query(bundle, args.split, args.query_index)
    records = trainer.trace_query(inf_ctx, query, derive_seed(args.seed, args.query_index), Labeler(bundle))
    _write(args.out, "".join(json.dumps(r.to_json()) + "\n" for r in records))
    return 0


def cmd_config(args) -> int:
    write_default_config(args.out, load_config(args.config))
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nshart", description="Inductive n-ary link prediction workbench.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("synth", help="write the planted-rule synthetic dataset")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.1, help="fraction of rule-violating cooperate facts")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model and write a checkpoint")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--checkpoint", required=True, help="output checkpoint path")
    s.add_argument("--log", help="epoch log path (JSON lines)")
    s.add_argument("--config", help="config file with a [train] section")
    s.add_argument("--task", choices=["TR-NEF", "TR-EF", "PSR"])
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--threads", type=int, default=1)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a query split")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True, help="metric report path (JSON)")
    s.add_argument("--table", help="also write the text table here")
    s.add_argument("--ranks-csv", help="dump per-query ranks as CSV")
    s.add_argument("--split", choices=["valid", "test"], default="test")
    s.add_argument("--seed", type=int, help="evaluation seed (default: the checkpoint's)")
    s.add_argument("--threads", type=int, default=1)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample", help="dump one query's sampled subgraph as JSON")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--split", choices=["valid", "test"], default="test")
    s.add_argument("--query-index", type=int, default=0)
    s.add_argument("--with-target", action="store_true", help="include the answer as a target (PSR-style)")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("trace-attention", help="write attention weights for one query (JSON lines)")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", choices=["valid", "test"], default="test")
    s.add_argument("--query-index", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_trace)

    s = sub.add_parser("config", help="write a config file with every default spelled out")
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="start from this file instead of the defaults")
    s.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - turned into a structured message
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
