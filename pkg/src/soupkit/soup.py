"""Souping algorithms: uniform, greedy, greedy-interpolated, learned and
partition-learned."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .counters import PassCounters
from .gnn import ModelParams, accuracy, evaluate, forward
from .graph import CsrGraph, GraphError, Partitioning, assemble_subgraph, choose_partitions
from .tensor import Tensor

log = logging.getLogger(__name__)

METHODS = ("uniform", "greedy", "gis", "ls", "pls")


class SoupError(ValueError):
    pass


@dataclass(frozen=True)
class LSConfig:
    epochs: int = 100
    base_lr: float = 100.0
    weight_decay: float = 0.0
    t0: int = 100
    alpha_seed: int = 0
    simplex: bool = True
    val_holdout: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise SoupError("epochs must be >= 1")
        if self.t0 < 1:
            raise SoupError("t0 must be >= 1")
        if not 0.0 <= self.val_holdout < 1.0:
            raise SoupError("val_holdout must be in [0, 1)")


@dataclass(frozen=True)
class PLSConfig(LSConfig):
    k: int = 32
    r: int = 8
    # full-validation scoring cadence for best-snapshot selection; math.inf
    # disables it, leaving only the final-epoch score
    score_interval: float = 10
    partition_seed: int = 0

    def __post_init__(self):
        super().__post_init__()
        if not 1 <= self.r <= self.k:
            raise SoupError(f"need 1 <= r <= k, got r={self.r}, k={self.k}")
        if self.score_interval < 1:
            raise SoupError("score_interval must be >= 1")


@dataclass(eq=False)
class SoupReport:
    method: str
    result: ModelParams
    val_acc: float
    test_acc: float
    wall_seconds: float
    counters: PassCounters
    trace: list[dict] = field(default_factory=list)
    ratios: np.ndarray | None = None

    def summary(self) -> dict:
        d = {
            "method": self.method,
            "val_acc": self.val_acc,
            "test_acc": self.test_acc,
            "wall_seconds": self.wall_seconds,
            "counters": self.counters.to_dict(),
            "trace": self.trace,
        }
        if self.ratios is not None:
            d["ratios"] = self.ratios.tolist()
        return d


# ---------------------------------------------------------------------------
# mixing primitives
# ---------------------------------------------------------------------------


def _check_members(members: list[ModelParams], at_least: int = 1) -> None:
    if len(members) < at_least:
        raise SoupError(f"need at least {at_least} ingredient(s), got {len(members)}")
    spec = members[0].spec
    for i, m in enumerate(members):
        if m.spec != spec:
            raise SoupError(f"ingredient {i} is not soup-compatible with ingredient 0")


def average(members: list[ModelParams]) -> ModelParams:
    """Entry-wise mean, independent of member order.

    Each entry's values are sorted before the float64 sum, so reordering
    members cannot change a single bit of the result.
    """
    _check_members(members)
    arrays = []
    for group in zip(*(m.arrays() for m in members)):
        stack = np.sort(np.stack(group).astype(np.float64), axis=0)
        acc = np.zeros(stack.shape[1:])
        for row in stack:
            acc += row
        arrays.append((acc / len(members)).astype(np.float32))
    return ModelParams.from_arrays(members[0].spec, arrays)


def interpolate(soup: ModelParams, member: ModelParams, alpha: float) -> ModelParams:
    """``(1 - alpha) * soup + alpha * member``; alpha=0 returns soup's values."""
    if alpha == 0.0:
        arrays = [a.copy() for a in soup.arrays()]
    elif alpha == 1.0:
        arrays = [a.copy() for a in member.arrays()]
    else:
        arrays = [((1.0 - alpha) * a.astype(np.float64) + alpha * b.astype(np.float64)).astype(np.float32)
                  for a, b in zip(soup.arrays(), member.arrays())]
    return ModelParams.from_arrays(soup.spec, arrays)


def mixing_ratios(raw: np.ndarray, simplex: bool = True) -> np.ndarray:
    """Effective per-layer ratios: softmax over ingredients (axis 0)."""
    if not simplex:
        return np.asarray(raw, dtype=np.float64)
    z = np.asarray(raw, dtype=np.float64)
    z = np.exp(z - z.max(axis=0, keepdims=True))
    return z / z.sum(axis=0, keepdims=True)


def build_soup(members: list[ModelParams], alphas: Tensor, simplex: bool = True) -> ModelParams:
    """Layer-wise weighted sum of ingredients.

    ``alphas`` is the raw N x L matrix; with ``simplex`` each column passes
    through a softmax first.  Differentiable w.r.t. ``alphas`` under a tape.
    """
    _check_members(members)
    spec = members[0].spec
    n, L = len(members), spec.num_layers
    if alphas.shape != (n, L):
        raise SoupError(f"alphas must have shape {(n, L)}, got {alphas.shape}")
    ratios = T.col_softmax(alphas) if simplex else alphas
    layers = []
    for l in range(L):
        scales = [T.pick(ratios, i, l) for i in range(n)]
        groups = []
        for gi, shape in enumerate(spec.group_shapes(l)):
            acc = T.zeros(*shape)
            for i, m in enumerate(members):
                acc = T.scale_add(acc, scales[i], m.layers[l][gi])
            groups.append(acc)
        layers.append(groups)
    return ModelParams(spec, layers)


def glorot_alphas(n: int, num_layers: int, seed: int) -> np.ndarray:
    std = math.sqrt(2.0 / (n + num_layers))
    return np.random.default_rng(seed).normal(0.0, std, size=(n, num_layers)).astype(np.float32)


def cosine_lr(base_lr: float, t: int, t0: int) -> float:
    """Cosine annealing restarted every ``t0`` steps."""
    return base_lr * (1.0 + math.cos(math.pi * (t % t0) / t0)) / 2.0


# ---------------------------------------------------------------------------
# performance-blind / greedy methods
# ---------------------------------------------------------------------------


def _finish(method, result, graph, t0, counters, trace, base, ratios=None) -> SoupReport:
    wall = time.perf_counter() - t0
    counters.peak_tracked_bytes = T.tracker().peak - base
    val = evaluate(result, graph)
    test = evaluate(result, graph, graph.test_mask)
    return SoupReport(method, result, val, test, wall, counters, trace, ratios)


def _score_members(members, graph, counters) -> list[float]:
    accs = []
    for m in members:
        counters.record_forward(graph.num_nodes)
        accs.append(evaluate(m, graph))
    return accs


def _sorted_order(accs: list[float]) -> list[int]:
    return sorted(range(len(accs)), key=lambda i: (-accs[i], i))


def uniform_soup(members: list[ModelParams], graph: CsrGraph | None = None) -> SoupReport:
    _check_members(members)
    base = T.tracker().reset_peak()
    t0 = time.perf_counter()
    counters = PassCounters()
    result = average(members)
    if graph is None:
        counters.peak_tracked_bytes = T.tracker().peak - base
        return SoupReport("uniform", result, float("nan"), float("nan"), time.perf_counter() - t0, counters)
    return _finish("uniform", result, graph, t0, counters, [], base)


def greedy_soup(members: list[ModelParams], graph: CsrGraph) -> SoupReport:
    """Sort by validation accuracy; keep a candidate iff the averaged soup's
    accuracy does not drop."""
    _check_members(members)
    base = T.tracker().reset_peak()
    t0 = time.perf_counter()
    counters = PassCounters()
    accs = _score_members(members, graph, counters)
    kept: list[int] = []
    current = -math.inf
    trace = []
    for i in _sorted_order(accs):
        tentative = average([members[j] for j in kept + [i]])
        counters.record_forward(graph.num_nodes)
        counters.interpolation_passes += 1
        acc = evaluate(tentative, graph)
        accepted = acc >= current
        if accepted:
            kept.append(i)
            current = acc
        trace.append({"ingredient": i, "val_acc": acc, "accepted": accepted, "soup_val_acc": current})
    result = average([members[j] for j in kept])
    report = _finish("greedy", result, graph, t0, counters, trace, base)
    report.trace.append({"kept": kept})
    return report


def gis_soup(members: list[ModelParams], graph: CsrGraph, granularity: int = 20) -> SoupReport:
    """Greedy interpolated souping over ``linspace(0, 1, granularity)``."""
    _check_members(members)
    if granularity < 2:
        raise SoupError(f"granularity must be >= 2, got {granularity}")
    base = T.tracker().reset_peak()
    t0 = time.perf_counter()
    counters = PassCounters()
    accs = _score_members(members, graph, counters)
    order = _sorted_order(accs)
    soup = members[order[0]]
    current = accs[order[0]]
    trace = []
    for i in order[1:]:
        for a in np.linspace(0.0, 1.0, granularity):
            tentative = interpolate(soup, members[i], float(a))
            counters.record_forward(graph.num_nodes)
            counters.interpolation_passes += 1
            acc = evaluate(tentative, graph)
            accepted = acc >= current
            if accepted:
                soup, current = tentative, acc
            trace.append({"ingredient": i, "alpha": float(a), "val_acc": acc, "accepted": accepted,
                          "soup_val_acc": current})
    return _finish("gis", soup, graph, t0, counters, trace, base)


# ---------------------------------------------------------------------------
# learned methods
# ---------------------------------------------------------------------------


def _split_validation(graph: CsrGraph, holdout: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """(fit mask, selection mask); both are the full validation set when holdout=0."""
    val = graph.val_mask
    if holdout == 0:
        return val, val
    idx = np.flatnonzero(val)
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 0xB01D])
    idx = idx[rng.permutation(len(idx))]
    n_sel = max(1, int(round(holdout * len(idx))))
    if n_sel >= len(idx):
        raise SoupError("val_holdout leaves no validation nodes for fitting")
    fit = np.zeros_like(val)
    sel = np.zeros_like(val)
    sel[idx[:n_sel]] = True
    fit[idx[n_sel:]] = True
    return fit, sel


def _learn(method: str, members, graph: CsrGraph, cfg: LSConfig, draw_view) -> SoupReport:
    """Shared optimization loop for LS (``draw_view`` is None) and PLS."""
    _check_members(members, at_least=2)
    spec = members[0].spec
    n, L = len(members), spec.num_layers
    fit_mask, sel_mask = _split_validation(graph, cfg.val_holdout, cfg.alpha_seed)
    score_every = getattr(cfg, "score_interval", 1)

    base = T.tracker().reset_peak()
    t0 = time.perf_counter()
    counters = PassCounters()
    alphas = Tensor(glorot_alphas(n, L, cfg.alpha_seed), requires_grad=True, name="alphas")
    best_acc, best_alphas, best_epoch = -math.inf, alphas.data.copy(), -1
    trace = []

    def consider(acc: float, epoch: int) -> None:
        nonlocal best_acc, best_alphas, best_epoch
        if acc > best_acc:
            best_acc, best_alphas, best_epoch = acc, alphas.data.copy(), epoch

    for epoch in range(cfg.epochs):
        if draw_view is None:
            nodes, sub = None, graph
        else:
            nodes, sub = draw_view(epoch)
        full = nodes is None or len(nodes) == graph.num_nodes
        fit = fit_mask if nodes is None else fit_mask[nodes]
        if not fit.any():
            raise SoupError(f"epoch {epoch}: subgraph has no validation nodes")

        # snapshot candidates are the alphas that produce this epoch's forward
        acc = None
        if not full and math.isfinite(score_every) and epoch % score_every == 0:
            acc = _score_alphas(members, alphas.data, graph, sel_mask, cfg.simplex, counters)

        try:
            with T.GradTape() as tape:
                soup = build_soup(members, alphas, cfg.simplex)
                logits = forward(soup, sub)
                loss = T.cross_entropy_masked(logits, sub.labels, fit)
        except T.TensorError as e:
            raise SoupError(f"epoch {epoch}: {e}") from e
        counters.record_forward(sub.num_nodes)
        loss_value = loss.item()
        if full:
            acc = accuracy(logits.data, sub.labels, sel_mask if nodes is None else sel_mask[nodes])
        if acc is not None:
            consider(acc, epoch)
        del soup, logits
        T.backward(tape, loss)
        del tape, loss
        counters.backward_passes += 1

        lr = cosine_lr(cfg.base_lr, epoch, cfg.t0)
        grad = alphas.grad.astype(np.float64)
        alphas.grad = None
        if cfg.weight_decay:
            grad = grad + cfg.weight_decay * alphas.data
        new = alphas.data - lr * grad
        if not np.isfinite(new).all():
            raise SoupError(f"non-finite alphas at epoch {epoch}")
        alphas.data = new.astype(np.float32)
        trace.append({"epoch": epoch, "loss": loss_value, "lr": lr, "nodes": int(sub.num_nodes),
                      "val_acc": acc, "alphas": alphas.data.tolist()})
        nodes = sub = None

    final_acc = _score_alphas(members, alphas.data, graph, sel_mask, cfg.simplex, counters)
    consider(final_acc, cfg.epochs)
    trace.append({"epoch": cfg.epochs, "val_acc": final_acc, "best_epoch": best_epoch})

    result = build_soup(members, Tensor(best_alphas), cfg.simplex)
    result = ModelParams.from_arrays(spec, [a.copy() for a in result.arrays()])
    return _finish(method, result, graph, t0, counters, trace, base, mixing_ratios(best_alphas, cfg.simplex))


def _score_alphas(members, raw, graph, sel_mask, simplex, counters) -> float:
    counters.scoring_passes += 1
    soup = build_soup(members, Tensor(raw), simplex)
    return accuracy(forward(soup, graph).data, graph.labels, sel_mask)


def learned_soup(members: list[ModelParams], graph: CsrGraph, cfg: LSConfig = LSConfig()) -> SoupReport:
    """Gradient descent on per-layer mixing ratios against validation loss.

    Returns the soup from the best-scoring alpha snapshot.
    """
    return _learn("ls", members, graph, cfg, None)


def pls_soup(members: list[ModelParams], graph: CsrGraph, partitioning: Partitioning,
             cfg: PLSConfig = PLSConfig()) -> SoupReport:
    """Learned souping where each step sees the union of ``cfg.r`` random parts."""
    if partitioning.k != cfg.k:
        raise SoupError(f"partitioning has k={partitioning.k}, config says k={cfg.k}")
    if len(partitioning.assign) != graph.num_nodes:
        raise SoupError("partitioning does not cover this graph")
    fit_mask, _ = _split_validation(graph, cfg.val_holdout, cfg.alpha_seed)

    def draw(epoch: int):
        parts = choose_partitions(partitioning, cfg.r, cfg.partition_seed, epoch)
        view = assemble_subgraph(graph, partitioning, parts)
        if not fit_mask[view.node_map].any():
            parts = choose_partitions(partitioning, cfg.r, cfg.partition_seed ^ 0x5A5A5A5A, epoch)
            view = assemble_subgraph(graph, partitioning, parts)
            if not fit_mask[view.node_map].any():
                raise SoupError(f"epoch {epoch}: partitions {parts} contain no validation nodes")
        return view.node_map, view.graph

    return _learn("pls", members, graph, cfg, draw)


def run_method(method: str, members, graph: CsrGraph, *, granularity: int = 20, ls: LSConfig | None = None,
               partitioning: Partitioning | None = None) -> SoupReport:
    if method == "uniform":
        return uniform_soup(members, graph)
    if method == "greedy":
        return greedy_soup(members, graph)
    if method == "gis":
        return gis_soup(members, graph, granularity)
    if method == "ls":
        return learned_soup(members, graph, ls or LSConfig())
    if method == "pls":
        if partitioning is None:
            raise SoupError("pls needs a partitioning")
        return pls_soup(members, graph, partitioning, ls or PLSConfig())
    raise SoupError(f"unknown method {method!r}; expected one of {METHODS}")


__all__ = [
    "GraphError", "LSConfig", "METHODS", "PLSConfig", "SoupError", "SoupReport", "average", "build_soup",
    "cosine_lr", "gis_soup", "glorot_alphas", "greedy_soup", "interpolate", "learned_soup", "mixing_ratios",
    "pls_soup", "run_method", "uniform_soup",
]
