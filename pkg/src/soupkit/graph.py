"""Graph storage, SBM generation, the GSKG file format, partitioning and
subgraph assembly for partition-based souping."""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .tensor import CsrMat

MAGIC = b"GSKG"
VERSION = 1
_HEADER = struct.Struct("<4sIQQII")

TRAIN, VAL, TEST = 0, 1, 2


class GraphFormatError(ValueError):
    pass


class GraphError(ValueError):
    pass


@dataclass(eq=False)
class CsrGraph:
    """Undirected graph with node features, labels and split masks.

    ``masks`` is a (3, num_nodes) boolean array ordered train/val/test.
    """

    adjacency: CsrMat
    features: np.ndarray
    labels: np.ndarray
    masks: np.ndarray
    num_classes: int
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        n = self.adjacency.rows
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        self.masks = np.ascontiguousarray(self.masks, dtype=bool)
        if self.adjacency.cols != n:
            raise GraphError("adjacency must be square")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise GraphError(f"features must have {n} rows")
        if self.labels.shape != (n,):
            raise GraphError("labels length must equal num_nodes")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise GraphError("labels out of [0, num_classes)")
        if self.masks.shape != (3, n):
            raise GraphError("masks must have shape (3, num_nodes)")
        if np.any(self.masks.sum(axis=0) > 1):
            raise GraphError("train/val/test masks overlap")

    @property
    def num_nodes(self) -> int:
        return self.adjacency.rows

    @property
    def num_edges(self) -> int:
        return self.adjacency.nnz

    @property
    def feat_dim(self) -> int:
        return self.features.shape[1]

    @property
    def train_mask(self) -> np.ndarray:
        return self.masks[TRAIN]

    @property
    def val_mask(self) -> np.ndarray:
        return self.masks[VAL]

    @property
    def test_mask(self) -> np.ndarray:
        return self.masks[TEST]

    def degrees(self) -> np.ndarray:
        return np.diff(self.adjacency.row_ptr)

    def edge_set(self) -> set[tuple[int, int]]:
        rows = np.repeat(np.arange(self.num_nodes), self.degrees())
        return set(zip(rows.tolist(), self.adjacency.col_idx.tolist()))

    def equals(self, other: "CsrGraph") -> bool:
        a, b = self.adjacency, other.adjacency
        return (
            self.num_classes == other.num_classes
            and np.array_equal(a.row_ptr, b.row_ptr)
            and np.array_equal(a.col_idx, b.col_idx)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.masks, other.masks)
        )


def check_symmetric(adj: CsrMat) -> None:
    m = adj.scipy()
    if m.diagonal().any():
        raise GraphError("adjacency stores self-loops")
    if (m != m.T).nnz:
        raise GraphError("adjacency is not symmetric")


def from_edges(num_nodes: int, src, dst) -> CsrMat:
    """Binary symmetric CSR adjacency from an undirected edge list."""
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    keep = src != dst
    src, dst = src[keep], dst[keep]
    rows = np.concatenate([src, dst])
    cols = np.concatenate([dst, src])
    m = sp.csr_matrix((np.ones(len(rows), dtype=np.float32), (rows, cols)), shape=(num_nodes, num_nodes))
    m.sum_duplicates()
    m.data[:] = 1.0
    m.sort_indices()
    return CsrMat(num_nodes, num_nodes, m.indptr, m.indices, m.data)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def generate_sbm(
    num_nodes: int,
    num_classes: int,
    p_in: float,
    p_out: float,
    feat_dim: int,
    noise: float,
    split_fractions=(0.5, 0.25, 0.25),
    seed: int = 0,
    signal: float = 1.0,
) -> CsrGraph:
    """Stochastic block model with class-indicator feature means.

    Nodes are assigned to blocks round-robin, so every block gets
    ``num_nodes // num_classes`` or one more node.  Class ``c`` nodes have
    feature mean ``signal * e_{c mod feat_dim}`` plus N(0, noise^2) noise.
    """
    if not 0 <= p_out < p_in <= 1:
        raise GraphError(f"need 0 <= p_out < p_in <= 1, got p_in={p_in}, p_out={p_out}")
    if len(split_fractions) != 3 or abs(sum(split_fractions) - 1.0) > 1e-9 or min(split_fractions) < 0:
        raise GraphError(f"split fractions must be three nonnegative values summing to 1, got {split_fractions}")
    if num_classes < 1 or num_nodes < num_classes:
        raise GraphError(f"{num_nodes} nodes cannot populate {num_classes} classes")
    if feat_dim < 1:
        raise GraphError("feat_dim must be positive")

    rng = np.random.default_rng(seed)
    labels = np.arange(num_nodes) % num_classes

    # sample the upper triangle block pair by block pair
    src, dst = [], []
    blocks = [np.flatnonzero(labels == c) for c in range(num_classes)]
    for a in range(num_classes):
        for b in range(a, num_classes):
            p = p_in if a == b else p_out
            if p == 0:
                continue
            na, nb = len(blocks[a]), len(blocks[b])
            hits = rng.random((na, nb)) < p
            if a == b:
                hits = np.triu(hits, k=1)
            ii, jj = np.nonzero(hits)
            src.append(blocks[a][ii])
            dst.append(blocks[b][jj])
    if src:
        adj = from_edges(num_nodes, np.concatenate(src), np.concatenate(dst))
    else:
        adj = from_edges(num_nodes, [], [])

    means = np.zeros((num_classes, feat_dim))
    means[np.arange(num_classes), np.arange(num_classes) % feat_dim] = signal
    features = means[labels] + noise * rng.standard_normal((num_nodes, feat_dim))

    perm = rng.permutation(num_nodes)
    n_train = int(round(split_fractions[0] * num_nodes))
    n_val = int(round(split_fractions[1] * num_nodes))
    masks = np.zeros((3, num_nodes), dtype=bool)
    masks[TRAIN, perm[:n_train]] = True
    masks[VAL, perm[n_train : n_train + n_val]] = True
    masks[TEST, perm[n_train + n_val :]] = True
    return CsrGraph(adj, features.astype(np.float32), labels, masks, num_classes)


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------


def save_graph(graph: CsrGraph, path) -> None:
    adj = graph.adjacency
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, graph.num_nodes, adj.nnz, graph.feat_dim, graph.num_classes))
        f.write(adj.row_ptr.astype("<u8").tobytes())
        f.write(adj.col_idx.astype("<u8").tobytes())
        f.write(graph.features.astype("<f4").tobytes())
        f.write(graph.labels.astype("<u4").tobytes())
        f.write(graph.masks.astype(np.uint8).tobytes())


def load_graph(path) -> CsrGraph:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise GraphFormatError("truncated header")
    magic, version, n, m, feat_dim, num_classes = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise GraphFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise GraphFormatError(f"unsupported format version {version}")

    pos = _HEADER.size

    def take(section: str, dtype: str, count: int) -> np.ndarray:
        nonlocal pos
        nbytes = np.dtype(dtype).itemsize * count
        if pos + nbytes > len(buf):
            raise GraphFormatError(f"truncated payload in section '{section}'")
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos)
        pos += nbytes
        return arr

    row_ptr = take("row_ptr", "<u8", n + 1).astype(np.int64)
    col_idx = take("col_idx", "<u8", m).astype(np.int64)
    features = take("features", "<f4", n * feat_dim).reshape(n, feat_dim).astype(np.float32)
    labels = take("labels", "<u4", n).astype(np.int64)
    masks = take("masks", "u1", 3 * n).reshape(3, n)
    if pos != len(buf):
        raise GraphFormatError(f"{len(buf) - pos} trailing bytes after masks")
    if masks.max(initial=0) > 1:
        raise GraphFormatError("mask bytes must be 0 or 1")
    try:
        adj = CsrMat(n, n, row_ptr, col_idx)
    except ValueError as e:
        raise GraphFormatError(f"invalid adjacency: {e}") from e
    check_symmetric(adj)
    return CsrGraph(adj, features, labels, masks.astype(bool), int(num_classes))


# ---------------------------------------------------------------------------
# partitioning
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Partitioning:
    k: int
    assign: np.ndarray
    val_counts: np.ndarray

    def members(self, part: int) -> np.ndarray:
        return np.flatnonzero(self.assign == part)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assign, minlength=self.k)

    def balance_bound(self) -> int:
        return int(np.ceil(0.1 * self.val_counts.mean())) + 1

    def is_balanced(self) -> bool:
        return int(self.val_counts.max() - self.val_counts.min()) <= self.balance_bound()


def _bfs_dist(adj: CsrMat, sources) -> np.ndarray:
    n = adj.rows
    dist = np.full(n, -1, dtype=np.int64)
    q = deque()
    for s in sources:
        dist[s] = 0
        q.append(s)
    rp, ci = adj.row_ptr, adj.col_idx
    while q:
        u = q.popleft()
        for v in ci[rp[u] : rp[u + 1]]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                q.append(v)
    return dist


def partition(graph: CsrGraph, k: int, seed: int = 0) -> Partitioning:
    """Validation-balanced BFS region growing.

    Seeds are spread farthest-first; at every step the part with the fewest
    validation nodes (ties: fewer nodes, lower index) claims its next BFS
    node, or jumps to the earliest unassigned node in a seeded order when its
    frontier is exhausted.  A final
    pass moves validation nodes from the fullest to the emptiest part until
    the balance bound holds.
    """
    n = graph.num_nodes
    if k < 2:
        raise GraphError(f"k must be >= 2, got {k}")
    if k > n:
        raise GraphError(f"k={k} exceeds node count {n}")
    val = graph.val_mask
    if val.sum() < k:
        raise GraphError(f"graph has {int(val.sum())} validation nodes, fewer than k={k}")

    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)
    adj = graph.adjacency
    rp, ci = adj.row_ptr, adj.col_idx

    seeds = [int(order[0])]
    dist = _bfs_dist(adj, seeds)
    for _ in range(1, k):
        # unreachable counts as infinitely far; ties by seeded rank
        d = np.where(dist < 0, n + 1, dist).astype(np.int64)
        d[seeds] = -1
        best = int(np.lexsort((rank, -d))[0])
        seeds.append(best)
        nd = _bfs_dist(adj, [best])
        dist = np.where((dist < 0) | ((nd >= 0) & (nd < dist)), nd, dist)

    assign = np.full(n, -1, dtype=np.int64)
    val_counts = np.zeros(k, dtype=np.int64)
    sizes = np.zeros(k, dtype=np.int64)
    frontiers = [deque() for _ in range(k)]

    def claim(p: int, u: int) -> None:
        assign[u] = p
        sizes[p] += 1
        val_counts[p] += int(val[u])
        nbrs = ci[rp[u] : rp[u + 1]]
        nbrs = nbrs[assign[nbrs] < 0]
        frontiers[p].extend(nbrs[np.argsort(rank[nbrs], kind="stable")].tolist())

    for p, s in enumerate(seeds):
        claim(p, s)
    remaining = n - k
    cursor = 0
    while remaining:
        for f in frontiers:
            while f and assign[f[0]] >= 0:
                f.popleft()
        p = min(range(k), key=lambda q: (val_counts[q], sizes[q], q))
        if frontiers[p]:
            u = frontiers[p].popleft()
        else:
            while assign[order[cursor]] >= 0:
                cursor += 1
            u = int(order[cursor])
        claim(p, u)
        remaining -= 1

    bound = int(np.ceil(0.1 * val_counts.mean())) + 1
    while val_counts.max() - val_counts.min() > bound:
        hi, lo = int(np.argmax(val_counts)), int(np.argmin(val_counts))
        cand = np.flatnonzero((assign == hi) & val)
        # prefer a validation node touching the receiving part
        touching = [u for u in cand if np.any(assign[ci[rp[u] : rp[u + 1]]] == lo)]
        u = min(touching or cand.tolist(), key=lambda v: rank[v])
        assign[u] = lo
        val_counts[hi] -= 1
        val_counts[lo] += 1

    return Partitioning(k, assign, val_counts)


def choose_partitions(partitioning: Partitioning | int, r: int, seed: int, epoch: int) -> tuple[int, ...]:
    """Uniform r-subset of part indices, a pure function of (seed, epoch)."""
    k = partitioning if isinstance(partitioning, int) else partitioning.k
    if not 1 <= r <= k:
        raise GraphError(f"need 1 <= r <= k, got r={r}, k={k}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(epoch)])))
    return tuple(sorted(int(x) for x in rng.choice(k, size=r, replace=False)))


@dataclass(eq=False)
class SubgraphView:
    """Induced subgraph on the union of selected parts.

    ``graph`` holds the compacted subgraph; ``node_map[i]`` is the parent id
    of compacted node ``i`` (ascending).
    """

    parent: CsrGraph
    selected_parts: tuple[int, ...]
    node_map: np.ndarray
    graph: CsrGraph

    @property
    def adjacency(self) -> CsrMat:
        return self.graph.adjacency

    @property
    def masks(self) -> np.ndarray:
        return self.graph.masks

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes


def induced_subgraph(graph: CsrGraph, nodes: np.ndarray) -> CsrGraph:
    nodes = np.asarray(nodes, dtype=np.int64)
    sub = graph.adjacency.scipy()[nodes][:, nodes].tocsr()
    sub.sort_indices()
    adj = CsrMat(len(nodes), len(nodes), sub.indptr, sub.indices, sub.data)
    return CsrGraph(adj, graph.features[nodes], graph.labels[nodes], graph.masks[:, nodes], graph.num_classes)


def assemble_subgraph(graph: CsrGraph, partitioning: Partitioning, selected) -> SubgraphView:
    sel = list(selected)
    if not sel:
        raise GraphError("empty partition selection")
    if len(set(sel)) != len(sel):
        raise GraphError(f"duplicate partition indices in {sel}")
    if min(sel) < 0 or max(sel) >= partitioning.k:
        raise GraphError(f"partition index out of range [0, {partitioning.k})")
    nodes = np.flatnonzero(np.isin(partitioning.assign, sel))
    return SubgraphView(graph, tuple(sorted(sel)), nodes, induced_subgraph(graph, nodes))
