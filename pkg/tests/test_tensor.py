import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dla import tensor as T
from dla.errors import ContractError, DimensionError, NumericError
from dla.tensor import Tensor
from dla.verification import finite_diff_gradcheck

TOL = 1e-4


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def naive_conv(x, w, stride, pad):
    B, C, H, W = x.shape
    co, _, k, _ = w.shape
    ho = (H + 2 * pad - k) // stride + 1
    wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((B, co, ho, wo))
    for b in range(B):
        for o in range(co):
            for r in range(ho):
                for c in range(wo):
                    acc = 0.0
                    for ci in range(C):
                        for i in range(k):
                            for j in range(k):
                                rr, cc = r * stride + i - pad, c * stride + j - pad
                                if 0 <= rr < H and 0 <= cc < W:
                                    v = x[b, ci, rr, cc]
                                else:
                                    v = 0.0
                                acc += v * w[o, ci, i, j]
                    out[b, o, r, c] = acc
    return out


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


# ------------------------------------------------------------------- matmul


def test_matmul_identity_and_scalar():
    X = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(T.matmul(np.eye(3), X).data, X)
    assert T.matmul([[2.0]], [[3.0]]).data.tolist() == [[6.0]]


def test_matmul_reference_path_matches_loop_exactly():
    rng = np.random.default_rng(11)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    with T.reference_mode():
        out = T.matmul(a, b).data
    assert np.array_equal(out, naive_matmul(a, b))
    assert np.allclose(T.matmul(a, b).data, out, rtol=0, atol=1e-13)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


# ------------------------------------------------------------------- conv2d


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 1, 5, 5))
    out = T.conv2d(x, np.ones((1, 1, 1, 1)))
    assert np.array_equal(out.data, x)


def test_conv_constant_field_interior():
    x = np.full((1, 1, 6, 6), 1.5)
    out = T.conv2d(x, np.ones((1, 1, 3, 3))).data
    assert np.allclose(out[0, 0, 1:-1, 1:-1], 13.5)
    assert out[0, 0, 0, 0] == pytest.approx(4 * 1.5)


def test_conv_reference_path_matches_loop_exactly():
    rng = np.random.default_rng(5)
    x, w = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3))
    with T.reference_mode():
        out = T.conv2d(x, w).data
    assert np.array_equal(out, naive_conv(x, w, 1, 1))


@pytest.mark.parametrize("k,stride,pad", [(1, 1, 0), (1, 2, 0), (3, 1, 1), (3, 2, 1), (3, 1, 0), (5, 2, 2), (5, 1, 2)])
def test_conv_fast_path_agrees_with_loop(k, stride, pad):
    rng = np.random.default_rng(k * 10 + stride)
    x, w = rng.normal(size=(2, 3, 7, 7)), rng.normal(size=(2, 3, k, k))
    ref = naive_conv(x, w, stride, pad)
    assert np.allclose(T.conv2d(x, w, stride, pad).data, ref, rtol=0, atol=1e-12)
    with T.reference_mode():
        assert np.array_equal(T.conv2d(x, w, stride, pad).data, ref)


def test_conv_output_extent():
    out = T.conv2d(np.ones((1, 2, 9, 7)), np.ones((3, 2, 3, 3)), stride=2, padding=1)
    assert out.shape == (1, 3, 5, 4)


def test_conv_rejects_even_kernel_and_empty_output():
    with pytest.raises(DimensionError):
        T.conv2d(np.ones((1, 1, 4, 4)), np.ones((1, 1, 2, 2)))
    with pytest.raises(DimensionError):
        T.conv2d(np.ones((1, 1, 2, 2)), np.ones((1, 1, 5, 5)), padding=0)
    with pytest.raises(DimensionError):
        T.conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)))


# ---------------------------------------------------------------------- GAP


def test_global_average_pool():
    assert T.global_average_pool(np.full((1, 2, 3, 3), 4.0)).data.tolist() == [[4.0, 4.0]]
    assert T.global_average_pool(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])).item() == 2.5
    x = np.random.default_rng(2).normal(size=(3, 4, 5, 6))
    oracle = np.array([[sum(x[b, c].ravel()) / 30 for c in range(4)] for b in range(3)])
    assert np.allclose(T.global_average_pool(x).data, oracle, rtol=0, atol=1e-15)


# ------------------------------------------------------------------ softmax


def test_softmax_examples():
    assert np.allclose(T.softmax(np.zeros(3)).data, 1 / 3, rtol=0, atol=1e-15)
    assert np.allclose(T.softmax([math.log(2), 0.0]).data, [2 / 3, 1 / 3], rtol=0, atol=1e-15)
    big = T.softmax([1000.0, 0.0]).data
    assert big[0] == pytest.approx(1.0) and big[1] < 1e-300


def test_softmax_nan_input():
    with pytest.raises(NumericError):
        T.softmax(np.array([0.0, np.nan]))


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)),
    st.floats(-100, 100),
)
def test_softmax_normalized_and_shift_invariant(v, shift):
    p = T.softmax(v).data
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.allclose(T.softmax(v + shift).data, p, rtol=0, atol=1e-12)


# ----------------------------------------------------------------- backward


def test_backward_polynomial_and_sigmoid():
    x = Tensor(3.0, requires_grad=True)
    T.backward(x * x)
    assert x.grad == pytest.approx(6.0)
    z = Tensor(0.0, requires_grad=True)
    T.backward(T.sigmoid(z))
    assert z.grad == pytest.approx(0.25)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(x * 2.0)


def test_backward_accumulates_and_zero_fills_unused_leaves():
    x = Tensor(2.0, requires_grad=True)
    unused = Tensor(np.ones(4), requires_grad=True)
    y = x * 3.0 + x * x  # x reached by two paths
    T.backward(y, leaves=[x, unused])
    assert x.grad == pytest.approx(7.0)
    assert np.array_equal(unused.grad, np.zeros(4))


def test_forward_rejects_non_finite():
    with pytest.raises(NumericError):
        T.log(Tensor(np.array([1.0, 0.0])))
    with pytest.raises(NumericError):
        Tensor(np.array([np.inf]))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad


# ---------------------------------------------------------------- gradcheck

UNARY = {
    "neg": T.neg,
    "exp": T.exp,
    "sigmoid": T.sigmoid,
    "tanh": T.tanh,
    "relu": T.relu,
    "identity": T.identity,
    "sum": lambda a: T.tsum(a, axis=1),
    "mean": lambda a: T.mean(a, axis=0, keepdims=True),
    "reshape": lambda a: a.reshape(6, 2),
    "transpose": lambda a: T.transpose(a),
    "getitem": lambda a: a[1:, ::2],
    "fancy_index": lambda a: a[np.array([0, 2, 2])],
    "softmax": lambda a: T.softmax(a, axis=-1),
}


def _weighted(out, rng):
    # random projection keeps every gradient coordinate O(1)
    return T.tsum(out * Tensor(rng.normal(size=out.shape)))


@pytest.mark.parametrize("name", sorted(UNARY))
def test_gradcheck_unary(name):
    rng = np.random.default_rng(abs(hash(name)) % 1000)
    a = leaf(rng, 3, 4)
    if name == "relu":  # keep clear of the kink
        a.data[np.abs(a.data) < 0.05] = 0.5
    w = rng.normal(size=UNARY[name](a).shape)
    err = finite_diff_gradcheck(lambda: T.tsum(UNARY[name](a) * w), [a])
    assert err <= TOL


def test_gradcheck_log_and_div():
    rng = np.random.default_rng(3)
    a = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
    b = Tensor(rng.uniform(0.5, 2.0, (4,)), requires_grad=True)
    w = rng.normal(size=(3, 4))
    assert finite_diff_gradcheck(lambda: T.tsum(T.log(a) * w), [a]) <= TOL
    assert finite_diff_gradcheck(lambda: T.tsum(T.div(a, b) * w), [a, b]) <= TOL


@pytest.mark.parametrize("op", [T.add, T.sub, T.mul])
def test_gradcheck_broadcasting_binary(op):
    rng = np.random.default_rng(4)
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 3, 1)
    w = rng.normal(size=(2, 3, 4))
    assert finite_diff_gradcheck(lambda: T.tsum(op(a, b) * w), [a, b]) <= TOL


def test_gradcheck_concat_stack_matmul():
    rng = np.random.default_rng(6)
    a, b, c = leaf(rng, 2, 3), leaf(rng, 2, 5), leaf(rng, 2, 3)
    m = leaf(rng, 8, 4)
    w = rng.normal(size=(2, 4))
    ws = rng.normal(size=(2, 2, 3))
    assert finite_diff_gradcheck(lambda: T.tsum(T.matmul(T.concat([a, b], axis=1), m) * w), [a, b, m]) <= TOL
    assert finite_diff_gradcheck(lambda: T.tsum(T.stack([a, c], axis=1) * ws), [a, c]) <= TOL
    A, Bm = leaf(rng, 2, 3, 4), leaf(rng, 2, 4, 2)
    w3 = rng.normal(size=(2, 3, 2))
    assert finite_diff_gradcheck(lambda: T.tsum(T.matmul(A, Bm) * w3), [A, Bm]) <= TOL


@pytest.mark.parametrize("k,stride,pad", [(1, 1, 0), (3, 1, 1), (3, 2, 1), (3, 1, 0), (1, 2, 0)])
def test_gradcheck_conv2d(k, stride, pad):
    rng = np.random.default_rng(7 + k + stride)
    x, w = leaf(rng, 2, 3, 5, 5), leaf(rng, 4, 3, k, k)
    ho = (5 + 2 * pad - k) // stride + 1
    proj = rng.normal(size=(2, 4, ho, ho))
    assert finite_diff_gradcheck(lambda: T.tsum(T.conv2d(x, w, stride, pad) * proj), [x, w]) <= TOL


def test_gradcheck_pool_batchnorm_crossentropy():
    rng = np.random.default_rng(8)
    x = leaf(rng, 4, 3, 3, 3)
    gamma = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
    beta = leaf(rng, 3)
    proj = rng.normal(size=(4, 3, 3, 3))

    def bn(training):
        rm, rv = np.zeros(3), np.ones(3)
        return T.tsum(T.batch_norm(x, gamma, beta, rm, rv, training) * proj)

    assert finite_diff_gradcheck(lambda: bn(True), [x, gamma, beta]) <= TOL
    assert finite_diff_gradcheck(lambda: bn(False), [x, gamma, beta]) <= TOL
    wp = rng.normal(size=(4, 3))
    assert finite_diff_gradcheck(lambda: T.tsum(T.global_average_pool(x) * wp), [x]) <= TOL
    logits = leaf(rng, 5, 4)
    labels = np.array([0, 3, 1, 1, 2])
    assert finite_diff_gradcheck(lambda: T.cross_entropy(logits, labels) * 5.0, [logits]) <= TOL


def test_batch_norm_running_statistics():
    rng = np.random.default_rng(9)
    x = rng.normal(2.0, 3.0, size=(8, 2, 4, 4))
    rm, rv = np.zeros(2), np.ones(2)
    T.batch_norm(x, np.ones(2), np.zeros(2), rm, rv, True)
    flat = x.transpose(1, 0, 2, 3).reshape(2, -1)
    assert np.allclose(rm, 0.1 * flat.mean(1))
    assert np.allclose(rv, 0.9 + 0.1 * flat.var(1, ddof=1))
    out = T.batch_norm(x, np.ones(2), np.zeros(2), rm, rv, False).data
    assert np.allclose(out[:, 0], (x[:, 0] - rm[0]) / np.sqrt(rv[0] + 1e-5))


def test_cross_entropy_uniform_logits():
    loss = T.cross_entropy(np.zeros((6, 10)), np.arange(6)).item()
    assert loss == pytest.approx(math.log(10), abs=1e-14)


def test_identical_inputs_give_bitwise_identical_results():
    def run():
        rng = np.random.default_rng(42)
        x, w = leaf(rng, 2, 3, 6, 6), leaf(rng, 4, 3, 3, 3)
        g = Tensor(rng.uniform(0.5, 1.5, 4), requires_grad=True)
        out = T.relu(T.batch_norm(T.conv2d(x, w), g, Tensor(np.zeros(4)), np.zeros(4), np.ones(4), True))
        loss = T.cross_entropy(T.global_average_pool(out), np.array([1, 2]))
        T.backward(loss)
        return loss.data, x.grad, w.grad, g.grad

    first, second = run(), run()
    for a, b in zip(first, second):
        assert np.array_equal(a, b)
