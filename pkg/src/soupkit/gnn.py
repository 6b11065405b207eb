"""Soup-able GCN and GraphSAGE-mean models, loss/accuracy and checkpoints."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .graph import CsrGraph, SubgraphView
from .tensor import CsrMat, Tensor

ARCHS = ("gcn", "sage")


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    num_layers: int
    in_dim: int
    hidden_dim: int
    out_dim: int
    dropout: float = 0.0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.num_layers < 2:
            raise ValueError("num_layers must be >= 2")
        if min(self.in_dim, self.hidden_dim, self.out_dim) < 1:
            raise ValueError("dimensions must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.in_dim] + [self.hidden_dim] * (self.num_layers - 1) + [self.out_dim]
        return list(zip(dims[:-1], dims[1:]))

    def group_shapes(self, layer: int) -> list[tuple[int, int]]:
        fi, fo = self.layer_dims()[layer]
        if self.arch == "gcn":
            return [(fi, fo), (1, fo)]
        return [(fi, fo), (fi, fo), (1, fo)]


@dataclass(eq=False)
class ModelParams:
    """Per-layer parameter groups.

    GCN layers hold ``[W, b]``; SAGE layers hold ``[W_self, W_neigh, b]``.
    """

    spec: ModelSpec
    layers: list[list[Tensor]]

    def __post_init__(self):
        if len(self.layers) != self.spec.num_layers:
            raise ValueError("layer count does not match spec")
        for l, groups in enumerate(self.layers):
            shapes = [g.shape for g in groups]
            if shapes != self.spec.group_shapes(l):
                raise ValueError(f"layer {l}: shapes {shapes} != {self.spec.group_shapes(l)}")

    def tensors(self) -> list[Tensor]:
        return [g for layer in self.layers for g in layer]

    def arrays(self) -> list[np.ndarray]:
        return [g.data for g in self.tensors()]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def copy(self, requires_grad: bool = False) -> "ModelParams":
        return ModelParams(self.spec, [[Tensor(g.data.copy(), requires_grad=requires_grad) for g in layer] for layer in self.layers])

    @classmethod
    def from_arrays(cls, spec: ModelSpec, arrays, requires_grad: bool = False) -> "ModelParams":
        it = iter(arrays)
        layers = [[Tensor(next(it), requires_grad=requires_grad) for _ in spec.group_shapes(l)] for l in range(spec.num_layers)]
        return cls(spec, layers)

    def compatible(self, other: "ModelParams") -> bool:
        return self.spec == other.spec

    def bit_equal(self, other: "ModelParams") -> bool:
        return self.compatible(other) and all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


def init_params(spec: ModelSpec, seed: int) -> ModelParams:
    """Glorot-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for l in range(spec.num_layers):
        groups = []
        for rows, cols in spec.group_shapes(l):
            if rows == 1:
                groups.append(Tensor(np.zeros((1, cols))))
            else:
                std = np.sqrt(2.0 / (rows + cols))
                groups.append(Tensor(rng.normal(0.0, std, size=(rows, cols))))
        layers.append(groups)
    return ModelParams(spec, layers)


# ---------------------------------------------------------------------------
# propagation operators
# ---------------------------------------------------------------------------


def gcn_norm(adj: CsrMat) -> CsrMat:
    """D^-1/2 (A + I) D^-1/2 with degrees counted after adding self-loops."""
    a = adj.scipy().astype(np.float64) + sp.identity(adj.rows, format="csr")
    deg = np.asarray(a.sum(axis=1)).ravel()
    dinv = 1.0 / np.sqrt(deg)
    norm = sp.diags(dinv) @ a @ sp.diags(dinv)
    return CsrMat.from_scipy(norm.astype(np.float32))


def mean_operator(adj: CsrMat) -> CsrMat:
    """Row-normalized adjacency; rows of isolated nodes stay zero."""
    a = adj.scipy().astype(np.float64)
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    return CsrMat.from_scipy((sp.diags(inv) @ a).astype(np.float32))


def propagation(graph: CsrGraph | SubgraphView, arch: str) -> CsrMat:
    g = graph.graph if isinstance(graph, SubgraphView) else graph
    op = g._cache.get(arch)
    if op is None:
        op = gcn_norm(g.adjacency) if arch == "gcn" else mean_operator(g.adjacency)
        g._cache[arch] = op
    return op


def aggregated_features(graph: CsrGraph | SubgraphView, arch: str) -> Tensor:
    """Propagation operator applied to the raw features, cached per graph.

    Features are constant, so the first layer's aggregation never changes:
    GCN computes (A_hat X) W instead of A_hat (X W), SAGE reuses mean(X).
    """
    g = _base(graph)
    key = (arch, "x", T.value_dtype())
    ax = g._cache.get(key)
    if ax is None:
        ax = T.spmm(propagation(g, arch), Tensor(g.features))
        g._cache[key] = ax
    return ax


def _base(graph: CsrGraph | SubgraphView) -> CsrGraph:
    return graph.graph if isinstance(graph, SubgraphView) else graph


# ---------------------------------------------------------------------------
# forward / loss
# ---------------------------------------------------------------------------


def forward(params: ModelParams, graph: CsrGraph | SubgraphView, train_seed: int | None = None, epoch: int = 0) -> Tensor:
    """Logits for every node.  ``train_seed=None`` is eval mode (no dropout)."""
    spec = params.spec
    g = _base(graph)
    if g.feat_dim != spec.in_dim:
        raise ValueError(f"feature dim {g.feat_dim} does not match model in_dim {spec.in_dim}")
    op = propagation(g, spec.arch)
    h = Tensor(g.features, name="features") if spec.arch == "sage" else None
    last = spec.num_layers - 1
    for l, groups in enumerate(params.layers):
        if spec.arch == "gcn":
            w, b = groups
            if l == 0:
                h = T.matmul(aggregated_features(g, "gcn"), w)
            else:
                h = T.spmm(op, T.matmul(h, w))
            h = T.bias_add(h, b)
        else:
            w_self, w_nb, b = groups
            nb = aggregated_features(g, "sage") if l == 0 else T.spmm(op, h)
            h = T.bias_add(T.add(T.matmul(h, w_self), T.matmul(nb, w_nb)), b)
        if l < last:
            h = T.relu(h)
            if train_seed is not None and spec.dropout > 0:
                h = T.dropout(h, spec.dropout, train_seed, epoch, l)
    return h


def accuracy(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    idx = np.flatnonzero(mask)
    if len(idx) == 0:
        raise ValueError("empty mask")
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    pred = np.argmax(logits[idx], axis=1)
    return float(np.mean(pred == labels[idx]))


def loss_and_accuracy(logits: Tensor, labels: np.ndarray, mask: np.ndarray) -> tuple[Tensor, float]:
    if not np.any(mask):
        raise ValueError("empty mask")
    loss = T.cross_entropy_masked(logits, labels, mask)
    return loss, accuracy(logits.data, labels, mask)


def evaluate(params: ModelParams, graph: CsrGraph | SubgraphView, mask: np.ndarray | None = None) -> float:
    """Eval-mode accuracy on ``mask`` (validation split by default)."""
    g = _base(graph)
    logits = forward(params, g)
    return accuracy(logits.data, g.labels, g.val_mask if mask is None else mask)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"GSKP"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIBBIIIf")


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: ModelParams, path) -> None:
    s = params.spec
    with open(path, "wb") as f:
        f.write(_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, ARCHS.index(s.arch), s.num_layers,
                                  s.in_dim, s.hidden_dim, s.out_dim, s.dropout))
        for a in params.arrays():
            f.write(struct.pack("<II", *a.shape))
            f.write(a.astype("<f4").tobytes())


def load_checkpoint(path) -> ModelParams:
    buf = Path(path).read_bytes()
    if len(buf) < _CKPT_HEADER.size:
        raise CheckpointError("truncated checkpoint header")
    magic, version, arch, L, din, dh, dout, drop = _CKPT_HEADER.unpack_from(buf, 0)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if arch >= len(ARCHS):
        raise CheckpointError(f"unknown arch code {arch}")
    spec = ModelSpec(ARCHS[arch], L, din, dh, dout, float(drop))
    pos = _CKPT_HEADER.size
    arrays = []
    for l in range(L):
        for shape in spec.group_shapes(l):
            if pos + 8 > len(buf):
                raise CheckpointError(f"truncated checkpoint in layer {l}")
            rows, cols = struct.unpack_from("<II", buf, pos)
            pos += 8
            if (rows, cols) != shape:
                raise CheckpointError(f"layer {l}: stored shape {(rows, cols)} != expected {shape}")
            nbytes = 4 * rows * cols
            if pos + nbytes > len(buf):
                raise CheckpointError(f"truncated checkpoint in layer {l}")
            arrays.append(np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=pos).reshape(rows, cols).astype(np.float32))
            pos += nbytes
    if pos != len(buf):
        raise CheckpointError("trailing bytes in checkpoint")
    return ModelParams.from_arrays(spec, arrays)
