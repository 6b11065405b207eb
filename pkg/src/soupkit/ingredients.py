"""Zero-communication ingredient training from a shared initialization."""

from __future__ import annotations

import logging
import multiprocessing as mp
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .gnn import ModelParams, ModelSpec, evaluate, forward, init_params
from .graph import CsrGraph

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, ingredient: int | None = None, detail: str = ""):
        self.epoch = epoch
        self.ingredient = ingredient
        where = f"ingredient {ingredient}, " if ingredient is not None else ""
        super().__init__(f"training diverged ({where}epoch {epoch}){': ' + detail if detail else ''}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr: float = 0.01
    weight_decay: float = 0.0
    optimizer: str = "adam"
    seed_base: int = 0
    # gradient noise std used only when the model has no dropout
    diversity_jitter: float = 1e-4

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")


@dataclass(eq=False)
class IngredientSet:
    shared_init: ModelParams
    members: list[ModelParams]
    val_accs: list[float]
    train_times: list[float]
    config: TrainConfig | None = None
    seeds: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.members)

    def bit_equal(self, other: "IngredientSet") -> bool:
        return (
            len(self) == len(other)
            and self.val_accs == other.val_accs
            and all(a.bit_equal(b) for a, b in zip(self.members, other.members))
        )


def train_one(graph: CsrGraph, init: ModelParams, config: TrainConfig, ingredient_seed: int) -> tuple[ModelParams, float]:
    """Full-batch training of one ingredient; dropout masks keyed to ``ingredient_seed``."""
    if init.spec.in_dim != graph.feat_dim or init.spec.out_dim != graph.num_classes:
        raise ValueError("initial parameters do not match graph dimensions")
    params = init.copy(requires_grad=True)
    leaves = params.tensors()
    jitter = config.diversity_jitter if init.spec.dropout == 0 else 0.0
    m = [np.zeros(p.shape) for p in leaves]
    v = [np.zeros(p.shape) for p in leaves]
    b1, b2 = ADAM_BETAS

    for epoch in range(config.epochs):
        try:
            with T.GradTape() as tape:
                logits = forward(params, graph, train_seed=ingredient_seed, epoch=epoch)
                loss = T.cross_entropy_masked(logits, graph.labels, graph.train_mask)
            T.backward(tape, loss)
        except T.TensorError as e:
            raise DivergenceError(epoch, detail=str(e)) from e
        if jitter:
            rng = np.random.default_rng([ingredient_seed & 0xFFFFFFFF, epoch, 0x5EED])
        for j, p in enumerate(leaves):
            g = p.grad.astype(np.float64)
            p.grad = None
            if config.weight_decay:
                g = g + config.weight_decay * p.data
            if jitter:
                g = g + jitter * rng.standard_normal(p.shape)
            if config.optimizer == "adam":
                m[j] = b1 * m[j] + (1 - b1) * g
                v[j] = b2 * v[j] + (1 - b2) * g * g
                mhat = m[j] / (1 - b1 ** (epoch + 1))
                vhat = v[j] / (1 - b2 ** (epoch + 1))
                step = mhat / (np.sqrt(vhat) + ADAM_EPS)
            else:
                step = g
            new = p.data - config.lr * step
            if not np.isfinite(new).all():
                raise DivergenceError(epoch, detail="non-finite parameters")
            p.data = new.astype(np.float32)

    trained = params.copy()
    return trained, evaluate(trained, graph)


def _train_task(graph, init, config, index):
    with threadpool_limits(1):
        t0 = time.perf_counter()
        params, acc = train_one(graph, init, config, config.seed_base + index)
        return params.arrays(), acc, time.perf_counter() - t0


# state inherited by forked workers
_SHARED: dict = {}


def _worker_loop(tasks, results) -> None:
    graph, init, config = _SHARED["job"]
    while True:
        i = tasks.get()
        if i is None:
            return
        try:
            results.put((i, _train_task(graph, init, config, i), None))
        except DivergenceError as e:
            results.put((i, None, (e.epoch, str(e))))
        except Exception as e:  # surfaced in the parent with the index
            results.put((i, None, (-1, repr(e))))


def train_population(graph: CsrGraph, spec: ModelSpec, config: TrainConfig, n: int, workers: int = 1,
                     init_seed: int | None = None) -> IngredientSet:
    """Train ``n`` ingredients over ``workers`` processes pulling from one queue.

    Member ``i`` depends only on (shared init, config, seed_base + i), so the
    result is the same for any worker count.
    """
    if n < 1 or workers < 1:
        raise ValueError("n and workers must be >= 1")
    init = init_params(spec, config.seed_base if init_seed is None else init_seed)
    out: list = [None] * n

    if workers == 1 or n == 1:
        for i in range(n):
            try:
                out[i] = _train_task(graph, init, config, i)
            except DivergenceError as e:
                raise DivergenceError(e.epoch, i, str(e)) from e
    else:
        ctx = mp.get_context("fork")
        tasks, results = ctx.Queue(), ctx.Queue()
        nproc = min(workers, n)
        for i in list(range(n)) + [None] * nproc:
            tasks.put(i)
        _SHARED["job"] = (graph, init, config)
        procs = [ctx.Process(target=_worker_loop, args=(tasks, results), daemon=True) for _ in range(nproc)]
        try:
            for p in procs:
                p.start()
            failure = None
            for _ in range(n):
                i, res, err = results.get()
                if err is not None and failure is None:
                    failure = (i, err)
                out[i] = res
        finally:
            for p in procs:
                p.join()
            _SHARED.pop("job", None)
        if failure is not None:
            i, (epoch, msg) = failure
            raise DivergenceError(epoch, i, msg)

    members = [ModelParams.from_arrays(spec, arrays) for arrays, _, _ in out]
    accs = [acc for _, acc, _ in out]
    times = [secs for _, _, secs in out]
    log.info("trained %d ingredients, val acc mean %.4f", n, float(np.mean(accs)))
    return IngredientSet(init, members, accs, times, config, [config.seed_base + i for i in range(n)])


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
