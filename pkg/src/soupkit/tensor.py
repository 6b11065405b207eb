"""Dense/CSR tensors with a small reverse-mode tape.

Only the primitives needed by GCN/SAGE layers and by differentiating a
weight soup with respect to its mixing coefficients are provided.  Values
are stored as float32; gradients are accumulated in float64 and handed back
as float32.

Every live tensor buffer is reported to a per-thread :class:`MemoryTracker`
so that peak activation memory can be measured reproducibly without looking
at OS-level RSS.
"""

from __future__ import annotations

import contextlib
import contextvars
import threading
import weakref
from typing import Callable, Iterator, Sequence

import numpy as np
import scipy.sparse as sp


class TensorError(ValueError):
    """Shape mismatch, non-finite value or misuse of the tape."""


# ---------------------------------------------------------------------------
# allocation tracking
# ---------------------------------------------------------------------------


class MemoryTracker:
    """Bytes of live tensor data and their high-water mark."""

    def __init__(self) -> None:
        self.live = 0
        self.peak = 0

    def alloc(self, nbytes: int) -> None:
        self.live += nbytes
        if self.live > self.peak:
            self.peak = self.live

    def free(self, nbytes: int) -> None:
        self.live -= nbytes

    def reset_peak(self) -> int:
        """Set the high-water mark to the current live count and return it."""
        self.peak = self.live
        return self.live


_local = threading.local()


def tracker() -> MemoryTracker:
    t = getattr(_local, "tracker", None)
    if t is None:
        t = _local.tracker = MemoryTracker()
    return t


def _release(t: MemoryTracker, nbytes: int) -> None:
    t.free(nbytes)


# ---------------------------------------------------------------------------
# precision
# ---------------------------------------------------------------------------

_dtype: contextvars.ContextVar[type] = contextvars.ContextVar("soupkit_dtype", default=np.float32)


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily store tensor values in ``dtype`` (used by f64 oracles)."""
    token = _dtype.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _dtype.reset(token)


def value_dtype():
    return _dtype.get()


# ---------------------------------------------------------------------------
# tensors
# ---------------------------------------------------------------------------


class Tensor:
    """A 2-D dense matrix (row-major) optionally marked as a gradient leaf."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, check: bool = True):
        arr = np.asarray(data, dtype=value_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise TensorError(f"tensors are 2-D, got shape {arr.shape}")
        if check and not np.isfinite(arr).all():
            raise TensorError(f"non-finite values in {name or 'tensor'}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        t = tracker()
        t.alloc(arr.nbytes)
        weakref.finalize(self, _release, t, arr.nbytes)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError(f"item() on tensor of shape {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


def zeros(rows: int, cols: int) -> Tensor:
    return Tensor(np.zeros((rows, cols)), check=False)


class CsrMat:
    """Canonical CSR matrix (sorted, duplicate-free column indices per row)."""

    __slots__ = ("rows", "cols", "row_ptr", "col_idx", "vals", "_sp", "_spT", "__weakref__")

    def __init__(self, rows: int, cols: int, row_ptr, col_idx, vals=None, validate: bool = True):
        self.rows = int(rows)
        self.cols = int(cols)
        self.row_ptr = np.ascontiguousarray(row_ptr, dtype=np.int64)
        self.col_idx = np.ascontiguousarray(col_idx, dtype=np.int64)
        if vals is None:
            vals = np.ones(len(self.col_idx))
        self.vals = np.ascontiguousarray(vals, dtype=np.float32)
        if validate:
            self._validate()
        self._sp = None
        self._spT = None
        t = tracker()
        nbytes = self.row_ptr.nbytes + self.col_idx.nbytes + self.vals.nbytes
        t.alloc(nbytes)
        weakref.finalize(self, _release, t, nbytes)

    def _validate(self) -> None:
        rp, ci = self.row_ptr, self.col_idx
        if len(rp) != self.rows + 1 or rp[0] != 0:
            raise TensorError("row_ptr must have length rows+1 and start at 0")
        if np.any(np.diff(rp) < 0):
            raise TensorError("row_ptr must be nondecreasing")
        if rp[-1] != len(ci) or len(ci) != len(self.vals):
            raise TensorError("row_ptr[-1], len(col_idx) and len(vals) disagree")
        if len(ci) and (ci.min() < 0 or ci.max() >= self.cols):
            raise TensorError("column index out of range")
        # strictly increasing within each row: a non-increase is only allowed at row starts
        if len(ci) > 1:
            bad = np.diff(ci) <= 0
            starts = np.zeros(len(ci) - 1, dtype=bool)
            inner = rp[1:-1]
            inner = inner[(inner > 0) & (inner < len(ci))]
            starts[inner - 1] = True
            if np.any(bad & ~starts):
                raise TensorError("col_idx not strictly increasing within a row")

    @classmethod
    def from_scipy(cls, m: sp.spmatrix) -> "CsrMat":
        m = sp.csr_matrix(m)
        m.sum_duplicates()
        m.sort_indices()
        return cls(m.shape[0], m.shape[1], m.indptr, m.indices, m.data)

    @classmethod
    def identity(cls, n: int) -> "CsrMat":
        return cls(n, n, np.arange(n + 1), np.arange(n), np.ones(n))

    def scipy(self) -> sp.csr_matrix:
        if self._sp is None:
            self._sp = sp.csr_matrix((self.vals, self.col_idx, self.row_ptr), shape=(self.rows, self.cols))
        return self._sp

    def transpose_scipy(self) -> sp.csr_matrix:
        if self._spT is None:
            self._spT = self.scipy().T.tocsr().astype(np.float64)
        return self._spT

    def to_dense(self) -> np.ndarray:
        return self.scipy().toarray()

    @property
    def nnz(self) -> int:
        return len(self.col_idx)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def __repr__(self) -> str:
        return f"CsrMat({self.rows}x{self.cols}, nnz={self.nnz})"


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class _Node:
    __slots__ = ("op", "out", "inputs", "backward")

    def __init__(self, op: str, out: Tensor, inputs: tuple[Tensor, ...], backward: Backward):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward = backward


_active_tape: contextvars.ContextVar["GradTape | None"] = contextvars.ContextVar("soupkit_tape", default=None)


class GradTape:
    """Records primitive ops while active (``with GradTape() as tape``)."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self._token = None

    def __enter__(self) -> "GradTape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def clear(self) -> None:
        self.nodes.clear()


def _record(op: str, out: Tensor, inputs: tuple[Tensor, ...], backward: Backward) -> Tensor:
    tape = _active_tape.get()
    if tape is not None and any(x.requires_grad for x in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(op, out, inputs, backward))
    return out


def _wrap(data: np.ndarray, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise TensorError(f"{op}: non-finite output")
    return Tensor(data, check=False)


def backward(tape: GradTape, loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse-replay ``tape`` from scalar ``loss``.

    Sets ``.grad`` (float32) on every leaf with ``requires_grad`` that the loss
    depends on and returns them keyed by ``id(leaf)``.
    """
    if not tape.nodes:
        raise TensorError("backward on an empty tape")
    if loss.shape != (1, 1):
        raise TensorError(f"loss must be scalar, got shape {loss.shape}")
    produced = {id(n.out) for n in tape.nodes}
    if id(loss) not in produced:
        raise TensorError("loss was not produced under this tape")

    mem = tracker()
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    mem.alloc(8)
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        up = grads.pop(id(node.out), None)
        if up is None:
            continue
        mem.free(up.nbytes)
        in_grads = node.backward(up)
        for x, g in zip(node.inputs, in_grads):
            if g is None or not x.requires_grad:
                continue
            key = id(x)
            prev = grads.get(key)
            if prev is None:
                g = np.array(g, dtype=np.float64, copy=True)
                grads[key] = g
                mem.alloc(g.nbytes)
            else:
                prev += g
            if key not in produced:
                leaves[key] = x
    out = {}
    for key, x in leaves.items():
        g = grads.pop(key)
        mem.free(g.nbytes)
        x.grad = g.astype(np.float32)
        out[key] = x.grad
    for g in grads.values():
        mem.free(g.nbytes)
    return out


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise TensorError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def spmm(a: CsrMat, b: Tensor) -> Tensor:
    """Sparse-dense product ``a @ b``."""
    if a.cols != b.rows:
        raise TensorError(f"spmm: shape mismatch {a.shape} @ {b.shape}")
    out = _wrap(np.asarray(a.scipy() @ b.data, dtype=value_dtype()), "spmm")

    def bwd(up):
        return (a.transpose_scipy() @ up,)

    return _record("spmm", out, (b,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise TensorError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    out = _wrap(a.data @ b.data, "matmul")

    def bwd(up):
        ga = up @ b.data.T.astype(np.float64) if a.requires_grad else None
        gb = a.data.T.astype(np.float64) @ up if b.requires_grad else None
        return ga, gb

    return _record("matmul", out, (a, b), bwd)


def scale_add(acc: Tensor, s: "Tensor | float", m: Tensor) -> Tensor:
    """``acc + s*m``; ``s`` is a 1x1 tensor (differentiable) or a float."""
    _same_shape(acc, m, "scale_add")
    if isinstance(s, Tensor):
        if s.shape != (1, 1):
            raise TensorError(f"scale_add: scale must be 1x1, got {s.shape}")
        sv = s.data[0, 0]
        out = _wrap(acc.data + sv * m.data, "scale_add")

        def bwd(up):
            gs = np.array([[np.dot(up.ravel(), m.data.ravel().astype(np.float64))]]) if s.requires_grad else None
            gm = float(sv) * up if m.requires_grad else None
            return up, gs, gm

        return _record("scale_add", out, (acc, s, m), bwd)

    sv = value_dtype()(s)
    out = _wrap(acc.data + sv * m.data, "scale_add")

    def bwd_const(up):
        return up, (float(sv) * up if m.requires_grad else None)

    return _record("scale_add", out, (acc, m), bwd_const)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    out = _wrap(a.data + b.data, "add")
    return _record("add", out, (a, b), lambda up: (up, up))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product."""
    _same_shape(a, b, "mul")
    out = _wrap(a.data * b.data, "mul")

    def bwd(up):
        return up * b.data, up * a.data

    return _record("mul", out, (a, b), bwd)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a 1 x cols row vector to every row of ``x``."""
    if b.shape != (1, x.cols):
        raise TensorError(f"bias_add: bias shape {b.shape} does not broadcast over {x.shape}")
    out = _wrap(x.data + b.data, "bias_add")

    def bwd(up):
        return up, up.sum(axis=0, keepdims=True)

    return _record("bias_add", out, (x, b), bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = _wrap(np.maximum(x.data, 0), "relu")
    return _record("relu", out, (x,), lambda up: (up * mask,))


def dropout_mask(shape: tuple[int, int], p: float, seed: int, epoch: int, layer: int) -> np.ndarray:
    """Keep-mask scaled by 1/(1-p), a pure function of (seed, epoch, layer)."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(epoch), int(layer)])
    rng = np.random.Generator(np.random.Philox(ss))
    keep = rng.random(shape) >= p
    return keep.astype(value_dtype()) / value_dtype()(1.0 - p)


def dropout(x: Tensor, p: float, seed: int, epoch: int = 0, layer: int = 0) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise TensorError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    mask = dropout_mask(x.shape, p, seed, epoch, layer)
    out = _wrap(x.data * mask, "dropout")
    return _record("dropout", out, (x,), lambda up: (up * mask,))


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def row_softmax(x: Tensor) -> Tensor:
    y = _softmax_rows(x.data.astype(np.float64))
    out = _wrap(y, "row_softmax")

    def bwd(up):
        return (y * (up - (up * y).sum(axis=1, keepdims=True)),)

    return _record("row_softmax", out, (x,), bwd)


def col_softmax(x: Tensor) -> Tensor:
    """Softmax down each column (used for per-layer mixing ratios)."""
    y = _softmax_rows(x.data.T.astype(np.float64)).T
    out = _wrap(y, "col_softmax")

    def bwd(up):
        return (y * (up - (up * y).sum(axis=0, keepdims=True)),)

    return _record("col_softmax", out, (x,), bwd)


def pick(x: Tensor, i: int, j: int) -> Tensor:
    """Entry ``x[i, j]`` as a 1x1 tensor."""
    out = Tensor(x.data[i : i + 1, j : j + 1].copy(), check=False)
    rows, cols = x.shape

    def bwd(up):
        g = np.zeros((rows, cols))
        g[i, j] = up[0, 0]
        return (g,)

    return _record("pick", out, (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    out = _wrap(np.array([[x.data.astype(np.float64).sum()]]), "sum")
    shape = x.shape
    return _record("sum", out, (x,), lambda up: (np.full(shape, up[0, 0]),))


def cross_entropy_masked(logits: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy (natural log) over rows selected by ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    labels = np.asarray(labels)
    if mask.shape != (logits.rows,) or labels.shape != (logits.rows,):
        raise TensorError("cross_entropy_masked: labels/mask length must equal logits rows")
    idx = np.flatnonzero(mask)
    if len(idx) == 0:
        raise TensorError("cross_entropy_masked: empty mask")
    z = logits.data[idx].astype(np.float64)
    y = labels[idx]
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(len(idx)), y]))
    out = _wrap(np.array([[loss]]), "cross_entropy")
    shape = logits.shape

    def bwd(up):
        p = np.exp(z - lse[:, None])
        p[np.arange(len(idx)), y] -= 1.0
        g = np.zeros(shape)
        g[idx] = p * (up[0, 0] / len(idx))
        return (g,)

    return _record("cross_entropy", out, (logits,), bwd)
