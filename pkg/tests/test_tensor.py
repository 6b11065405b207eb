import gc

import numpy as np
import pytest
import scipy.sparse as sp

from soupkit import tensor as T
from soupkit.tensor import CsrMat, GradTape, Tensor, TensorError

from oracles import naive_matmul

SEEDS = range(20)
H = 1e-3
RTOL = 1e-3


def rel_err(analytic, numeric):
    """Norm-wise relative error of one leaf's gradient."""
    num = np.linalg.norm(numeric)
    return np.linalg.norm(analytic - numeric) / max(num, 1e-12)


def fd_check(fn, arrays, h=H):
    """Compare tape gradients (float32 values) with central differences taken in float64."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with GradTape() as tape:
        loss = fn(*leaves)
    T.backward(tape, loss)
    errs = []
    with T.precision(np.float64):
        base = [np.asarray(a, dtype=np.float64) for a in arrays]
        for li, leaf in enumerate(leaves):
            numeric = np.zeros(base[li].shape)
            for idx in np.ndindex(base[li].shape):
                vals = []
                for sign in (1, -1):
                    pert = [b.copy() for b in base]
                    pert[li][idx] += sign * h
                    vals.append(fn(*[Tensor(p) for p in pert]).item())
                numeric[idx] = (vals[0] - vals[1]) / (2 * h)
            errs.append(rel_err(leaf.grad.astype(np.float64), numeric))
    return max(errs)


def weighted_sum(x, seed=99):
    """Scalar probe sum(x * W) with a fixed random W so every entry matters."""
    w = np.random.default_rng(seed).normal(size=x.shape)
    return T.sum_all(T.mul(x, Tensor(w)))


def random_csr(rows, cols, density, seed):
    m = sp.random(rows, cols, density=density, random_state=seed, format="csr", dtype=np.float64)
    return CsrMat.from_scipy(m)


# --- forward kernels against brute force ------------------------------------


def test_spmm_identity_and_zero_rows():
    b = Tensor(np.arange(6.0).reshape(3, 2))
    assert np.array_equal(T.spmm(CsrMat.identity(3), b).data, b.data)
    empty = CsrMat(3, 3, [0, 0, 0, 0], [], [])
    assert not T.spmm(empty, b).data.any()


def test_spmm_matches_triple_loop():
    a = random_csr(5, 5, 0.4, 7)
    b = np.random.default_rng(7).normal(size=(5, 3))
    got = T.spmm(a, Tensor(b)).data
    np.testing.assert_allclose(got, naive_matmul(a.to_dense(), b.astype(np.float32)), rtol=1e-5, atol=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_spmm_equals_dense_product(seed):
    rng = np.random.default_rng(seed)
    r, c, k = rng.integers(1, 51, size=3)
    a = random_csr(r, c, rng.uniform(0.0, 0.5), seed)
    b = rng.normal(size=(c, k)).astype(np.float32)
    np.testing.assert_allclose(T.spmm(a, Tensor(b)).data, a.to_dense() @ b, rtol=1e-5, atol=1e-5)


def test_matmul_cases():
    a = np.random.default_rng(11).normal(size=(4, 6)).astype(np.float32)
    assert np.array_equal(T.matmul(Tensor(a), Tensor(np.eye(6))).data, a)
    assert T.matmul(Tensor([[2.0]]), Tensor([[3.0]])).item() == 6.0
    b = np.random.default_rng(12).normal(size=(6, 2)).astype(np.float32)
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), rtol=1e-5, atol=1e-6)


def test_shape_mismatches_raise():
    with pytest.raises(TensorError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(TensorError):
        T.spmm(CsrMat.identity(3), Tensor(np.ones((2, 2))))
    with pytest.raises(TensorError):
        T.scale_add(Tensor(np.ones((2, 2))), 1.0, Tensor(np.ones((2, 3))))
    with pytest.raises(TensorError):
        T.bias_add(Tensor(np.ones((2, 2))), Tensor(np.ones((1, 3))))


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_is_an_error():
    with pytest.raises(TensorError):
        Tensor([[np.nan]])
    with pytest.raises(TensorError):
        T.matmul(Tensor([[3e38]]), Tensor([[10.0]]))


def test_csr_rejects_non_canonical():
    with pytest.raises(TensorError):
        CsrMat(2, 3, [0, 2, 3], [2, 1, 0])
    with pytest.raises(TensorError):
        CsrMat(2, 3, [0, 2, 1], [0, 1, 2])
    with pytest.raises(TensorError):
        CsrMat(2, 3, [0, 2, 3], [0, 0, 1])


def test_scale_add_values():
    m = Tensor(np.arange(4.0).reshape(2, 2))
    assert np.array_equal(T.scale_add(T.zeros(2, 2), 1.0, m).data, m.data)
    assert np.array_equal(T.scale_add(m, 0.0, Tensor(np.full((2, 2), 9.0))).data, m.data)


def test_scale_add_scalar_gradient():
    s = Tensor([[0.5]], requires_grad=True)
    with GradTape() as tape:
        loss = T.sum_all(T.scale_add(T.zeros(2, 2), s, Tensor(np.ones((2, 2)))))
    T.backward(tape, loss)
    assert s.grad[0, 0] == pytest.approx(4.0)
    with T.precision(np.float64):
        f = lambda v: T.sum_all(T.scale_add(T.zeros(2, 2), Tensor([[v]]), Tensor(np.ones((2, 2))))).item()
        assert (f(0.5 + H) - f(0.5 - H)) / (2 * H) == pytest.approx(4.0, rel=1e-9)


# --- backward contract -------------------------------------------------------


def test_backward_sum_and_square():
    x = Tensor([[1.0, 2.0, 3.0]], requires_grad=True)
    with GradTape() as tape:
        loss = T.sum_all(x)
    T.backward(tape, loss)
    assert np.array_equal(x.grad, np.ones((1, 3)))
    x.grad = None
    with GradTape() as tape:
        loss = T.sum_all(T.mul(x, x))
    T.backward(tape, loss)
    assert np.array_equal(x.grad, [[2.0, 4.0, 6.0]])


def test_backward_errors_and_unmarked_leaves():
    with pytest.raises(TensorError):
        T.backward(GradTape(), Tensor([[1.0]]))
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    const = Tensor(np.ones((2, 2)))
    with GradTape() as tape:
        y = T.mul(x, const)
    with pytest.raises(TensorError):
        T.backward(tape, y)
    with GradTape() as tape:
        loss = T.sum_all(T.mul(x, const))
    T.backward(tape, loss)
    assert x.grad.shape == x.shape
    assert const.grad is None


def test_tape_replays_in_reverse():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with GradTape() as tape:
        T.sum_all(T.relu(T.mul(x, x)))
    assert tape.ops == ["mul", "relu", "sum"]


PRIMITIVES = {
    "spmm": (lambda b, a: weighted_sum(T.spmm(a, b)), lambda rng: [rng.normal(size=(6, 3))]),
    "matmul": (lambda a, b: weighted_sum(T.matmul(a, b)), lambda rng: [rng.normal(size=(4, 5)), rng.normal(size=(5, 3))]),
    "scale_add": (lambda acc, s, m: weighted_sum(T.scale_add(acc, s, m)),
                  lambda rng: [rng.normal(size=(3, 4)), rng.normal(size=(1, 1)), rng.normal(size=(3, 4))]),
    "add": (lambda a, b: weighted_sum(T.add(a, b)), lambda rng: [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]),
    "mul": (lambda a, b: weighted_sum(T.mul(a, b)), lambda rng: [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]),
    "bias_add": (lambda x, b: weighted_sum(T.bias_add(x, b)), lambda rng: [rng.normal(size=(5, 3)), rng.normal(size=(1, 3))]),
    # keep inputs away from the kink so h cannot cross it
    "relu": (lambda x: weighted_sum(T.relu(x)),
             lambda rng: [np.sign(z := rng.normal(size=(4, 4))) * (np.abs(z) + 0.05)]),
    "dropout": (lambda x: weighted_sum(T.dropout(x, 0.5, seed=3, epoch=1, layer=0)), lambda rng: [rng.normal(size=(5, 4))]),
    "row_softmax": (lambda x: weighted_sum(T.row_softmax(x)), lambda rng: [rng.normal(size=(4, 5))]),
    "col_softmax": (lambda x: weighted_sum(T.col_softmax(x)), lambda rng: [rng.normal(size=(4, 3))]),
    "pick": (lambda x: T.mul(T.pick(x, 1, 2), T.pick(x, 0, 0)), lambda rng: [rng.normal(size=(3, 3))]),
    "cross_entropy_masked": (
        lambda z: T.cross_entropy_masked(z, np.array([0, 2, 1, 3, 2, 0]), np.array([1, 1, 0, 1, 0, 1], dtype=bool)),
        lambda rng: [rng.normal(size=(6, 4))]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_backward_matches_finite_differences(name):
    fn, make = PRIMITIVES[name]
    worst = 0.0
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        arrays = make(rng)
        if name == "spmm":
            a = random_csr(5, 6, 0.5, seed)
            worst = max(worst, fd_check(lambda b: fn(b, a), arrays))
        else:
            worst = max(worst, fd_check(fn, arrays))
    assert worst < RTOL, f"{name}: worst relative error {worst:.2e}"


def test_composite_graph_gradients():
    worst = 0.0
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        a = random_csr(8, 8, 0.3, seed)
        a.vals += 0.5
        labels = rng.integers(0, 3, size=8)
        mask = rng.random(8) < 0.7
        mask[0] = True
        x = rng.normal(size=(8, 5))
        # redraw until no x-dependent pre-activation sits within 10h of the relu kink
        live = np.diff(a.row_ptr) > 0
        for _ in range(1000):
            if not np.any(np.abs(a.to_dense() @ x)[live] < 10 * H):
                break
            x = rng.normal(size=(8, 5))

        def fn(x, w):
            h = T.relu(T.spmm(a, x))
            return T.cross_entropy_masked(T.row_softmax(T.matmul(h, w)), labels, mask)

        worst = max(worst, fd_check(fn, [x, rng.normal(size=(5, 3))]))
    assert worst < RTOL


def test_gradients_are_bit_reproducible():
    def run():
        rng = np.random.default_rng(8)
        x = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        with GradTape() as tape:
            h = T.dropout(T.relu(T.matmul(x, w)), 0.3, seed=1, epoch=2, layer=0)
            loss = T.cross_entropy_masked(h, np.array([0, 1, 2, 0, 1, 2]), np.ones(6, dtype=bool))
        T.backward(tape, loss)
        return x.grad.copy(), w.grad.copy()

    (x1, w1), (x2, w2) = run(), run()
    assert np.array_equal(x1, x2) and np.array_equal(w1, w2)


def test_dropout_mask_is_keyed_by_seed_epoch_layer():
    m = T.dropout_mask((50, 50), 0.5, 1, 0, 0)
    assert np.array_equal(m, T.dropout_mask((50, 50), 0.5, 1, 0, 0))
    for other in [(2, 0, 0), (1, 1, 0), (1, 0, 1)]:
        assert not np.array_equal(m, T.dropout_mask((50, 50), 0.5, *other))
    assert set(np.unique(m)) <= {0.0, 2.0}


def test_tracker_peak_monotone_and_resets():
    gc.collect()
    mem = T.tracker()
    base = mem.reset_peak()
    peaks = []
    x = Tensor(np.ones((100, 100)), requires_grad=True)
    with GradTape() as tape:
        h = T.relu(T.mul(x, x))
        peaks.append(mem.peak)
        loss = T.sum_all(h)
        peaks.append(mem.peak)
    del h
    T.backward(tape, loss)
    peaks.append(mem.peak)
    assert peaks == sorted(peaks)
    assert mem.peak - base >= 3 * 100 * 100 * 4
    del tape, loss, x
    gc.collect()
    assert mem.reset_peak() == mem.live
    assert mem.live <= base + 8
