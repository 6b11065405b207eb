"""Command line entry point: ``soupkit {generate,train,soup,bench}``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict
from pathlib import Path

from . import bench
from .gnn import ModelSpec, load_checkpoint, save_checkpoint
from .graph import generate_sbm, load_graph, partition, save_graph
from .ingredients import TrainConfig, train_population
from .soup import METHODS, LSConfig, PLSConfig, run_method

log = logging.getLogger("soupkit")


def _cmd_generate(args) -> int:
    g = generate_sbm(args.nodes, args.classes, args.p_in, args.p_out, args.feat_dim, args.noise,
                     tuple(args.split), args.seed)
    save_graph(g, args.out)
    print(f"wrote {args.out}: {g.num_nodes} nodes, {g.num_edges} directed edges, {g.num_classes} classes")
    return 0


def _cmd_train(args) -> int:
    graph = load_graph(args.graph)
    spec = ModelSpec(args.arch, args.layers, graph.feat_dim, args.hidden, graph.num_classes, args.dropout)
    cfg = TrainConfig(epochs=args.epochs, lr=args.lr, weight_decay=args.wd, optimizer=args.opt,
                      seed_base=args.seed, diversity_jitter=args.diversity_jitter if args.jitter else 0.0)
    ing = train_population(graph, spec, cfg, args.n, args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(ing.members):
        save_checkpoint(m, out / f"ingredient_{i:03}.gskp")
    manifest = {
        "graph": str(args.graph),
        "model": asdict(spec),
        "config": asdict(cfg),
        "workers": args.workers,
        "ingredients": [
            {"file": f"ingredient_{i:03}.gskp", "seed": s, "val_acc": a, "train_seconds": t}
            for i, (s, a, t) in enumerate(zip(ing.seeds, ing.val_accs, ing.train_times))
        ],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"trained {len(ing)} ingredients into {out}; val acc " + ", ".join(f"{a:.4f}" for a in ing.val_accs))
    return 0


def _load_ingredients(directory) -> list:
    d = Path(directory)
    manifest = d / "manifest.json"
    if manifest.exists():
        files = [d / e["file"] for e in json.loads(manifest.read_text())["ingredients"]]
    else:
        files = sorted(d.glob("ingredient_*.gskp"))
    if not files:
        raise SystemExit(f"no ingredient checkpoints in {d}")
    return [load_checkpoint(f) for f in files]


def _cmd_soup(args) -> int:
    graph = load_graph(args.graph)
    members = _load_ingredients(args.ingredients)
    common = dict(epochs=args.epochs, base_lr=args.lr, weight_decay=args.wd, t0=args.t0 or args.epochs,
                  alpha_seed=args.seed, simplex=not args.no_simplex, val_holdout=args.val_holdout)
    part = None
    if args.method == "pls":
        ls = PLSConfig(**common, k=args.parts, r=args.budget,
                       score_interval=math.inf if args.score_interval <= 0 else args.score_interval,
                       partition_seed=args.seed)
        part = partition(graph, args.parts, args.seed)
    else:
        ls = LSConfig(**common)
    report = run_method(args.method, members, graph, granularity=args.granularity, ls=ls, partitioning=part)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt = out.with_suffix(".gskp")
    save_checkpoint(report.result, ckpt)
    summary = report.summary()
    summary["checkpoint"] = ckpt.name
    summary["num_ingredients"] = len(members)
    out.write_text(json.dumps(summary, indent=2, default=float))
    print(f"{args.method}: val {report.val_acc:.4f} test {report.test_acc:.4f} in {report.wall_seconds:.3f}s "
          f"(fwd {report.counters.forward_passes}, bwd {report.counters.backward_passes})")
    return 0


def _cmd_bench(args) -> int:
    plan = bench.ExperimentPlan.load(args.plan) if args.plan else bench.default_plan(args.arch, args.seed)
    table = bench.run_plan(plan, args.out)
    report = bench.write_results(plan, table, args.out)
    sys.stdout.write(bench.emit_table(table, "markdown"))
    for name, ok in {**report["counter_checks"], **report["timing_checks"]}.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    failed = [r.method for r in table.rows if r.error]
    if failed:
        print(f"failed cells: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="soupkit", description="Train GNN ingredients and soup them.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a stochastic-block-model graph file")
    g.add_argument("--nodes", type=int, default=2000)
    g.add_argument("--classes", type=int, default=7)
    g.add_argument("--p-in", type=float, default=0.01)
    g.add_argument("--p-out", type=float, default=0.001)
    g.add_argument("--feat-dim", type=int, default=64)
    g.add_argument("--noise", type=float, default=0.5)
    g.add_argument("--split", type=float, nargs=3, default=(0.5, 0.25, 0.25))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_generate)

    t = sub.add_parser("train", help="train N ingredients from one shared initialization")
    t.add_argument("--graph", required=True)
    t.add_argument("--arch", choices=("gcn", "sage"), default="gcn")
    t.add_argument("--layers", type=int, default=2)
    t.add_argument("--hidden", type=int, default=64)
    t.add_argument("--dropout", type=float, default=0.5)
    t.add_argument("--epochs", type=int, default=100)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--wd", type=float, default=0.0)
    t.add_argument("--opt", choices=("sgd", "adam"), default="adam")
    t.add_argument("--n", type=int, default=10)
    t.add_argument("--workers", type=int, default=1)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--diversity-jitter", dest="jitter", action=argparse.BooleanOptionalAction, default=True,
                   help="gradient noise when dropout is 0 (default on)")
    t.add_argument("--jitter-std", dest="diversity_jitter", type=float, default=1e-4)
    t.add_argument("--out", required=True)
    t.set_defaults(func=_cmd_train)

    s = sub.add_parser("soup", help="combine trained ingredients")
    s.add_argument("--method", choices=METHODS, required=True)
    s.add_argument("--ingredients", required=True)
    s.add_argument("--graph", required=True)
    s.add_argument("--granularity", type=int, default=20)
    s.add_argument("--epochs", type=int, default=100)
    s.add_argument("--lr", type=float, default=100.0)
    s.add_argument("--wd", type=float, default=0.0)
    s.add_argument("--t0", type=int, default=None, help="cosine restart period (default: epochs)")
    s.add_argument("--parts", type=int, default=32)
    s.add_argument("--budget", type=int, default=8)
    s.add_argument("--score-interval", type=float, default=10, help="<= 0 scores only the final epoch")
    s.add_argument("--val-holdout", type=float, default=0.0)
    s.add_argument("--no-simplex", action="store_true", help="mix with raw alphas instead of a per-layer softmax")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_soup)

    b = sub.add_parser("bench", help="run an experiment plan and write result tables")
    b.add_argument("--plan", help="plan.json (default: built-in desk-scale plan)")
    b.add_argument("--arch", choices=("gcn", "sage"), default="gcn", help="architecture of the built-in plan")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(func=_cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as e:
        print(f"soupkit: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
