"""Experiment plans, result tables and the comparison report."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .counters import PassCounters
from .gnn import ModelSpec, evaluate, save_checkpoint
from .graph import CsrGraph, generate_sbm, load_graph, partition
from .ingredients import IngredientSet, TrainConfig, train_population
from .soup import METHODS, LSConfig, PLSConfig, SoupReport, run_method

log = logging.getLogger(__name__)

__all__ = ["CellRow", "ExperimentPlan", "PassCounters", "ResultTable", "default_plan", "emit_table",
           "run_plan", "speedup_and_memory_summary"]

COLUMNS = ("method", "acc_mean", "acc_std", "seconds", "peak_mb", "fwd", "bwd")

DEFAULT_LS = {"epochs": 100, "lr": 100.0, "wd": 0.0, "t0": 100}


class PlanError(ValueError):
    pass


@dataclass
class ExperimentPlan:
    graph: dict
    model: dict
    ingredients: dict
    cells: list[dict]
    reps: int = 4
    seed: int = 0

    def __post_init__(self):
        if not self.cells:
            raise PlanError("plan needs at least one cell")
        if self.reps < 1:
            raise PlanError("reps must be >= 1")
        if not ("path" in self.graph) ^ ("sbm" in self.graph):
            raise PlanError("graph must have exactly one of 'path' or 'sbm'")
        for c in self.cells:
            if c.get("method") not in METHODS:
                raise PlanError(f"unknown method in cell {c}")
        labels = [cell_label(c) for c in self.cells]
        if len(set(labels)) != len(labels):
            raise PlanError(f"cell labels must be unique, got {labels}")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        unknown = set(d) - {"graph", "model", "ingredients", "cells", "reps", "seed"}
        if unknown:
            raise PlanError(f"unknown plan keys {sorted(unknown)}")
        try:
            return cls(d["graph"], d.get("model", {}), d.get("ingredients", {}), list(d["cells"]),
                       int(d.get("reps", 4)), int(d.get("seed", 0)))
        except KeyError as e:
            raise PlanError(f"plan missing key {e}") from e

    @classmethod
    def load(cls, path) -> "ExperimentPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {"graph": self.graph, "model": self.model, "ingredients": self.ingredients,
                "cells": self.cells, "reps": self.reps, "seed": self.seed}


def default_plan(arch: str = "gcn", seed: int = 0) -> ExperimentPlan:
    """Desk-scale plan: SBM(2000, 7 classes), 10 ingredients, all four
    informed/uninformed methods, 4 soups per cell."""
    return ExperimentPlan(
        graph={"sbm": {"nodes": 2000, "classes": 7, "p_in": 0.01, "p_out": 0.001, "feat_dim": 64,
                       "noise": 0.5, "seed": seed}},
        model={"arch": arch, "layers": 2, "hidden": 64, "dropout": 0.5},
        ingredients={"n": 10, "epochs": 100, "lr": 0.01, "wd": 0.0, "opt": "adam", "workers": 1},
        cells=[
            {"method": "uniform"},
            {"method": "gis", "config": {"granularity": 20}},
            {"method": "ls", "config": dict(DEFAULT_LS)},
            {"method": "pls", "config": dict(DEFAULT_LS, parts=32, budget=8)},
        ],
        reps=4,
        seed=seed,
    )


def cell_label(cell: dict) -> str:
    return cell.get("label", cell["method"])


def build_graph(spec: dict) -> CsrGraph:
    if "path" in spec:
        return load_graph(spec["path"])
    s = spec["sbm"]
    return generate_sbm(s["nodes"], s["classes"], s["p_in"], s["p_out"], s.get("feat_dim", 64),
                        s.get("noise", 0.5), tuple(s.get("split", (0.5, 0.25, 0.25))), s.get("seed", 0))


def model_spec(model: dict, graph: CsrGraph) -> ModelSpec:
    return ModelSpec(model.get("arch", "gcn"), model.get("layers", 2), graph.feat_dim,
                     model.get("hidden", 64), graph.num_classes, model.get("dropout", 0.5))


def train_config(ing: dict, seed: int) -> TrainConfig:
    return TrainConfig(epochs=ing.get("epochs", 100), lr=ing.get("lr", 0.01), weight_decay=ing.get("wd", 0.0),
                       optimizer=ing.get("opt", "adam"), seed_base=ing.get("seed", seed),
                       diversity_jitter=ing.get("jitter", 1e-4))


def soup_seed(plan_seed: int, cell_index: int, rep: int) -> int:
    return int(np.random.SeedSequence([plan_seed, cell_index, rep]).generate_state(1)[0])


def ls_config(method: str, cfg: dict, seed: int) -> LSConfig:
    common = dict(epochs=cfg.get("epochs", 100), base_lr=cfg.get("lr", 100.0), weight_decay=cfg.get("wd", 0.0),
                  t0=cfg.get("t0", cfg.get("epochs", 100)), alpha_seed=seed, simplex=not cfg.get("no_simplex", False),
                  val_holdout=cfg.get("val_holdout", 0.0))
    if method == "pls":
        return PLSConfig(**common, k=cfg.get("parts", 32), r=cfg.get("budget", 8),
                         score_interval=cfg.get("score_interval", 10), partition_seed=seed)
    return LSConfig(**common)


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------


@dataclass
class CellRow:
    method: str
    test_accs: list[float]
    val_accs: list[float]
    seconds: list[float]
    peak_bytes: list[int]
    counters: list[dict]
    config: dict = field(default_factory=dict)
    error: str | None = None

    @property
    def acc_mean(self) -> float:
        return statistics.fmean(self.test_accs) if self.test_accs else math.nan

    @property
    def acc_std(self) -> float:
        # sample std; undefined for a single repetition
        return statistics.stdev(self.test_accs) if len(self.test_accs) >= 2 else math.nan

    @property
    def seconds_mean(self) -> float:
        return statistics.fmean(self.seconds) if self.seconds else math.nan

    @property
    def peak_mb(self) -> float:
        return statistics.fmean(self.peak_bytes) / 2**20 if self.peak_bytes else math.nan

    @property
    def fwd(self) -> float:
        return statistics.fmean(c["forward_passes"] for c in self.counters) if self.counters else math.nan

    @property
    def bwd(self) -> float:
        return statistics.fmean(c["backward_passes"] for c in self.counters) if self.counters else math.nan

    @property
    def mean_nodes_per_pass(self) -> float:
        if not self.counters:
            return math.nan
        return statistics.fmean(c["mean_nodes_per_pass"] for c in self.counters)

    def to_dict(self) -> dict:
        return {"method": self.method, "config": self.config, "error": self.error,
                "acc_mean": self.acc_mean, "acc_std": self.acc_std, "seconds": self.seconds_mean,
                "peak_mb": self.peak_mb, "fwd": self.fwd, "bwd": self.bwd,
                "mean_nodes_per_pass": self.mean_nodes_per_pass, "test_accs": self.test_accs,
                "val_accs": self.val_accs, "seconds_per_rep": self.seconds, "peak_bytes": self.peak_bytes,
                "counters": self.counters}


@dataclass
class ResultTable:
    rows: list[CellRow]
    ingredient_test_accs: list[float] = field(default_factory=list)
    ingredient_val_accs: list[float] = field(default_factory=list)
    num_nodes: int = 0

    def row(self, method: str) -> CellRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    @property
    def ingredient_mean(self) -> float:
        return statistics.fmean(self.ingredient_test_accs) if self.ingredient_test_accs else math.nan

    def to_dict(self) -> dict:
        return {"rows": [r.to_dict() for r in self.rows], "ingredient_test_accs": self.ingredient_test_accs,
                "ingredient_val_accs": self.ingredient_val_accs, "ingredient_mean": self.ingredient_mean,
                "num_nodes": self.num_nodes}


def run_plan(plan: ExperimentPlan, out_dir=None, ingredients: IngredientSet | None = None) -> ResultTable:
    """Train one shared ingredient pool and run every cell x repetition.

    A failing cell is recorded with its error and the remaining cells still
    run.  Checkpoints go to ``out_dir/soups`` when ``out_dir`` is given.
    """
    graph = build_graph(plan.graph)
    if ingredients is None:
        spec = model_spec(plan.model, graph)
        cfg = train_config(plan.ingredients, plan.seed)
        ingredients = train_population(graph, spec, cfg, plan.ingredients.get("n", 10),
                                       plan.ingredients.get("workers", 1))
    members = ingredients.members
    table = ResultTable([], [evaluate(m, graph, graph.test_mask) for m in members], list(ingredients.val_accs),
                        graph.num_nodes)
    soups_dir = None
    if out_dir is not None:
        soups_dir = Path(out_dir) / "soups"
        soups_dir.mkdir(parents=True, exist_ok=True)

    partitions = {}
    for ci, cell in enumerate(plan.cells):
        label, method = cell_label(cell), cell["method"]
        cfg = dict(cell.get("config", {}))
        row = CellRow(label, [], [], [], [], [], config=cfg)
        try:
            part = None
            if method == "pls":
                k = cfg.get("parts", 32)
                if k not in partitions:
                    partitions[k] = partition(graph, k, plan.seed)
                part = partitions[k]
            for rep in range(plan.reps):
                seed = soup_seed(plan.seed, ci, rep)
                ls = ls_config(method, cfg, seed) if method in ("ls", "pls") else None
                report: SoupReport = run_method(method, members, graph, granularity=cfg.get("granularity", 20),
                                                 ls=ls, partitioning=part)
                row.test_accs.append(report.test_acc)
                row.val_accs.append(report.val_acc)
                row.seconds.append(report.wall_seconds)
                row.peak_bytes.append(report.counters.peak_tracked_bytes)
                row.counters.append(report.counters.to_dict())
                if soups_dir is not None:
                    save_checkpoint(report.result, soups_dir / f"{label}_rep{rep}.gskp")
                log.info("%s rep %d: test %.4f, %.3fs", label, rep, report.test_acc, report.wall_seconds)
        except Exception as e:  # recorded per cell so the rest of the plan still runs
            log.error("cell %s failed: %s", label, e)
            row.error = f"{type(e).__name__}: {e}"
        table.rows.append(row)
    return table


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _fmt(x: float, digits: int = 4) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.{digits}f}"


def _cells(r: CellRow) -> list[str]:
    return [r.method, _fmt(r.acc_mean), _fmt(r.acc_std), _fmt(r.seconds_mean), _fmt(r.peak_mb, 3),
            _fmt(r.fwd, 1), _fmt(r.bwd, 1)]


def emit_table(table: ResultTable, fmt: str = "csv") -> str:
    rows = [r for r in table.rows if r.error is None]
    if not rows:
        raise ValueError("cannot emit an empty table")
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in rows:
            w.writerow(_cells(r))
        return buf.getvalue()
    if fmt != "markdown":
        raise ValueError(f"unknown table format {fmt!r}")
    best_acc = max(r.acc_mean for r in rows)
    best_time = min(r.seconds_mean for r in rows)
    lines = ["| " + " | ".join(COLUMNS) + " |", "|" + "---|" * len(COLUMNS)]
    for r in rows:
        cells = _cells(r)
        if r.acc_mean == best_acc:
            cells[1] = f"**{cells[1]}**"
        if r.seconds_mean == best_time:
            cells[3] = f"**{cells[3]}**"
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def speedup_and_memory_summary(table: ResultTable, baseline: str = "gis") -> dict[str, tuple[float, float]]:
    """Per method: (baseline seconds / method seconds, method peak / baseline peak)."""
    try:
        base = table.row(baseline)
    except KeyError:
        raise ValueError(f"baseline {baseline!r} not in table") from None
    out = {}
    for r in table.rows:
        if r.error is not None:
            continue
        speed = base.seconds_mean / r.seconds_mean if r.seconds_mean > 0 else math.inf
        mem = r.peak_mb / base.peak_mb if base.peak_mb > 0 else math.nan
        out[r.method] = (speed, mem)
    return out


def counter_checks(plan: ExperimentPlan, table: ResultTable) -> dict[str, bool]:
    """Exact pass-count laws per cell (GIS, LS) and the PLS node-fraction law."""
    n = plan.ingredients.get("n", 10)
    checks = {}
    for cell, row in zip(plan.cells, table.rows):
        if row.error is not None:
            continue
        cfg = cell.get("config", {})
        label = cell_label(cell)
        if cell["method"] == "gis":
            g = cfg.get("granularity", 20)
            checks[f"{label}: interpolation forwards == (N-1)*g"] = all(
                c["interpolation_passes"] == (n - 1) * g for c in row.counters)
            checks[f"{label}: forwards == (N-1)*g + N"] = all(
                c["forward_passes"] == (n - 1) * g + n for c in row.counters)
        elif cell["method"] in ("ls", "pls"):
            e = cfg.get("epochs", 100)
            checks[f"{label}: forwards == backwards == e"] = all(
                c["forward_passes"] == e and c["backward_passes"] == e for c in row.counters)
            if cell["method"] == "pls":
                expect = cfg.get("budget", 8) / cfg.get("parts", 32) * table.num_nodes
                checks[f"{label}: mean nodes/pass within 20% of (r/k)*n"] = abs(row.mean_nodes_per_pass - expect) <= 0.2 * expect
    return checks


def timing_checks(table: ResultTable) -> dict[str, bool]:
    """Wall-clock orderings; informational only, never CI-gating."""
    names = {r.method for r in table.rows if r.error is None}
    out = {}
    if {"ls", "gis"} <= names:
        out["ls faster than gis"] = table.row("ls").seconds_mean < table.row("gis").seconds_mean
    if {"pls", "ls"} <= names:
        out["pls faster than ls"] = table.row("pls").seconds_mean < table.row("ls").seconds_mean
    return out


def write_results(plan: ExperimentPlan, table: ResultTable, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.csv").write_text(emit_table(table, "csv"))
    (out / "table.md").write_text(emit_table(table, "markdown"))
    baseline = "gis" if any(r.method == "gis" and r.error is None for r in table.rows) else None
    report = {
        "plan": copy.deepcopy(plan.to_dict()),
        "memory_metric": "tracked tensor bytes (high-water mark above run start), not OS RSS or GPU memory",
        "table": table.to_dict(),
        "summary": {k: {"speedup": s, "memory_ratio": m}
                    for k, (s, m) in speedup_and_memory_summary(table, baseline).items()} if baseline else {},
        "summary_baseline": baseline,
        "counter_checks": counter_checks(plan, table),
        "timing_checks": timing_checks(table),
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, default=float))
    return report
