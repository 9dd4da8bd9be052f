"""Tensor engine: forward oracles, gradient checks, determinism."""

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from vdformer import tensor as T
from vdformer.errors import ContractError, ShapeError
from vdformer.gradcheck import check_gradients
from vdformer.tensor import Tape, Tensor


def leaf(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


def test_matmul_identity(rng):
    b = rng.standard_normal((3, 4))
    out = T.matmul(Tensor(np.eye(3)), Tensor(b))
    assert_array_equal(out.data, b)


def test_matmul_zeros(rng):
    b = rng.standard_normal((2, 2))
    out = T.matmul(Tensor(np.zeros((2, 2))), Tensor(b))
    assert_array_equal(out.data, np.zeros((2, 2)))


def test_matmul_matches_triple_loop_oracle(rng):
    a = rng.standard_normal((3, 3))
    b = rng.standard_normal((3, 3))
    out = T.matmul(Tensor(a), Tensor(b))
    assert_allclose(out.data, naive_matmul(a, b), atol=1e-12, rtol=0)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as e:
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    assert "(2, 3)" in str(e.value) and "(4, 2)" in str(e.value)


def test_matmul_batched_matches_loop(rng):
    a = rng.standard_normal((5, 2, 3, 4))
    b = rng.standard_normal((5, 2, 4, 6))
    out = T.matmul(Tensor(a), Tensor(b))
    for i in range(5):
        for j in range(2):
            assert_allclose(out.data[i, j], a[i, j] @ b[i, j], atol=1e-12)


def test_matmul_gradients(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
    w = leaf(rng, 3, 2)

    def fn():
        return T.sum_all(T.mul(T.matmul(a, b), w))

    check_gradients(fn, [a, b, w], max_per_tensor=20)


def test_matmul_batched_with_2d_weight_gradients(rng):
    a = leaf(rng, 3, 2, 4)
    w = leaf(rng, 4, 5)

    def fn():
        return T.sum_all(T.matmul(a, w))

    check_gradients(fn, [a, w], max_per_tensor=30)


# ---------------------------------------------------------------------------
# softmax / layer norm
# ---------------------------------------------------------------------------

def test_softmax_constant_row_is_uniform():
    out = T.softmax_last(Tensor(np.full((4,), 3.7)))
    assert_allclose(out.data, np.full(4, 0.25), atol=1e-15)


def test_softmax_shift_invariance(rng):
    x = rng.standard_normal((2, 5))
    a = T.softmax_last(Tensor(x))
    b = T.softmax_last(Tensor(x + 100.0))
    assert_allclose(a.data, b.data, atol=1e-12)


def test_softmax_analytic():
    out = T.softmax_last(Tensor(np.array([0.0, math.log(3.0)])))
    assert_allclose(out.data, [0.25, 0.75], atol=1e-15)


def test_softmax_rows_sum_to_one(rng):
    x = rng.standard_normal((3, 4, 7))
    out = T.softmax_last(Tensor(x))
    assert_allclose(out.data.sum(axis=-1), np.ones((3, 4)), atol=1e-12)


def test_layer_norm_constant_token():
    x = Tensor(np.full((3, 8), 2.5))
    out = T.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)), eps=1e-5)
    assert np.abs(out.data).max() <= math.sqrt(1e-5)


def test_layer_norm_zero_gamma_gives_beta(rng):
    x = Tensor(rng.standard_normal((4, 6)))
    beta = rng.standard_normal(6)
    out = T.layer_norm(x, Tensor(np.zeros(6)), Tensor(beta))
    assert_array_equal(out.data, np.broadcast_to(beta, (4, 6)))


def test_layer_norm_matches_direct_oracle(rng):
    x = rng.standard_normal((2, 3, 9))
    gamma = rng.standard_normal(9)
    beta = rng.standard_normal(9)
    eps = 1e-5
    out = T.layer_norm(Tensor(x), Tensor(gamma), Tensor(beta), eps=eps)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    expected = (x - mu) / np.sqrt(var + eps) * gamma + beta
    assert_allclose(out.data, expected, atol=1e-10, rtol=0)


def test_layer_norm_rejects_nonpositive_eps(rng):
    x = Tensor(rng.standard_normal((2, 4)))
    with pytest.raises(ContractError):
        T.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)), eps=0.0)


# ---------------------------------------------------------------------------
# backward contract
# ---------------------------------------------------------------------------

def test_backward_sum_of_squares(rng):
    x = leaf(rng, 5)
    with Tape() as tape:
        loss = T.sum_all(T.mul(x, x))
    tape.backward(loss)
    assert_allclose(x.grad, 2 * x.data, atol=1e-12)


def test_backward_softmax_cross_entropy_grad_is_p_minus_y(rng):
    logits = leaf(rng, 4, 6)
    onehot = np.zeros((4, 6))
    onehot[np.arange(4), [1, 0, 5, 2]] = 1.0
    with Tape() as tape:
        loss = T.softmax_cross_entropy_mean(logits, Tensor(onehot))
    tape.backward(loss)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    p = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)
    assert_allclose(logits.grad, (p - onehot) / 4, atol=1e-12)


def test_backward_rejects_nonscalar_loss(rng):
    x = leaf(rng, 3)
    with Tape() as tape:
        y = T.mul(x, x)
    with pytest.raises(ContractError):
        tape.backward(y)


def test_backward_composite_graph_matches_finite_differences(rng):
    x = leaf(rng, 2, 6)
    w1 = leaf(rng, 6, 5)
    b1 = leaf(rng, 5)
    gamma = leaf(rng, 5)
    beta = leaf(rng, 5)

    def fn():
        h = T.matmul(x, w1) + b1
        h = T.gelu(h)
        h = T.layer_norm(h, gamma, beta)
        h = T.softmax_last(h)
        return T.sum_all(T.mul(h, h))

    check_gradients(fn, [x, w1, b1, gamma, beta], max_per_tensor=12)


# ---------------------------------------------------------------------------
# per-op gradient checks (finite-difference oracle)
# ---------------------------------------------------------------------------

def test_gradcheck_elementwise_ops(rng):
    x = leaf(rng, 3, 4)
    y = leaf(rng, 3, 4)
    probe = Tensor(rng.standard_normal((3, 4)))

    cases = {
        "add": lambda: T.sum_all(T.mul(x + y, probe)),
        "mul": lambda: T.sum_all(T.mul(T.mul(x, y), probe)),
        "gelu": lambda: T.sum_all(T.mul(T.gelu(x), probe)),
        "exp": lambda: T.sum_all(T.mul(T.exp(x * 0.3), probe)),
        "softmax": lambda: T.sum_all(T.mul(T.softmax_last(x), probe)),
    }
    for name, fn in cases.items():
        check_gradients(fn, [x, y] if name in ("add", "mul") else [x], max_per_tensor=6)


def test_gradcheck_add_broadcast(rng):
    x = leaf(rng, 2, 3, 4)
    b = leaf(rng, 4)
    probe = Tensor(rng.standard_normal((2, 3, 4)))

    def fn():
        return T.sum_all(T.mul(x + b, probe))

    check_gradients(fn, [x, b], max_per_tensor=8)


def test_gradcheck_shape_ops(rng):
    x = leaf(rng, 2, 3, 4)
    probe = Tensor(rng.standard_normal((4, 6)))

    def fn():
        h = T.permute(x, (2, 0, 1))
        h = T.reshape(h, (4, 6))
        return T.sum_all(T.mul(h, probe))

    check_gradients(fn, [x], max_per_tensor=10)


def test_gradcheck_slice_pad_concat(rng):
    x = leaf(rng, 3, 5)
    y = leaf(rng, 2, 5)
    probe = Tensor(rng.standard_normal((7, 7)))

    def fn():
        joined = T.concat([x, y, T.slice_(x, (slice(0, 2),))], axis=0)
        padded = T.pad(joined, ((0, 0), (1, 1)))
        return T.sum_all(T.mul(padded, probe))

    check_gradients(fn, [x, y], max_per_tensor=10)


def test_gradcheck_conv2d(rng):
    x = leaf(rng, 2, 5, 6)
    w = leaf(rng, 3, 2, 3, 3)
    b = leaf(rng, 3)
    probe = Tensor(rng.standard_normal((3, 5, 6)))

    def fn():
        return T.sum_all(T.mul(T.conv2d(x, w, b, stride=1, padding=1), probe))

    check_gradients(fn, [x, w, b], max_per_tensor=8)


def test_gradcheck_conv2d_strided(rng):
    x = leaf(rng, 2, 8, 8)
    w = leaf(rng, 4, 2, 4, 4)
    b = leaf(rng, 4)
    probe = Tensor(rng.standard_normal((4, 2, 2)))

    def fn():
        return T.sum_all(T.mul(T.conv2d(x, w, b, stride=4), probe))

    check_gradients(fn, [x, w, b], max_per_tensor=8)


def test_gradcheck_pool_and_upsample(rng):
    x = leaf(rng, 2, 6, 6)
    probe_up = Tensor(rng.standard_normal((2, 12, 12)))
    probe_mp = Tensor(rng.standard_normal((2, 3, 3)))

    check_gradients(lambda: T.sum_all(T.mul(T.upsample2x_nearest(x), probe_up)), [x])
    check_gradients(lambda: T.sum_all(T.mul(T.maxpool2x2(x), probe_mp)), [x])


def test_gradcheck_losses(rng):
    logits = leaf(rng, 3, 4)
    targets = Tensor((rng.random((3, 4)) > 0.5).astype(float))
    pred = leaf(rng, 6)
    tgt = Tensor(rng.standard_normal(6))
    probe = Tensor(rng.standard_normal(6))

    check_gradients(lambda: T.bce_with_logits_mean(logits, targets), [logits])
    check_gradients(
        lambda: T.sum_all(T.mul(T.smooth_l1(pred, tgt, beta=1.0), probe)), [pred]
    )


# ---------------------------------------------------------------------------
# analytic loss values
# ---------------------------------------------------------------------------

def test_bce_all_zero_logits_is_ln2():
    logits = Tensor(np.zeros((5, 7)))
    targets = Tensor(np.zeros((5, 7)))
    out = T.bce_with_logits_mean(logits, targets)
    assert_allclose(out.item(), math.log(2.0), atol=1e-12)


def test_smooth_l1_analytic_quadratic_zone():
    out = T.smooth_l1(Tensor(np.array([0.5])), Tensor(np.array([0.0])), beta=1.0)
    assert_allclose(out.data, [0.125], atol=1e-15)


def test_smooth_l1_analytic_linear_zone():
    out = T.smooth_l1(Tensor(np.array([3.0])), Tensor(np.array([0.0])), beta=1.0)
    assert_allclose(out.data, [2.5], atol=1e-15)


def test_maxpool_values(rng):
    x = np.arange(16, dtype=float).reshape(1, 4, 4)
    out = T.maxpool2x2(Tensor(x))
    assert_array_equal(out.data, [[[5.0, 7.0], [13.0, 15.0]]])


def test_upsample_values():
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    out = T.upsample2x_nearest(Tensor(x))
    expected = np.array([[[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]], dtype=float)
    assert_array_equal(out.data, expected)


# ---------------------------------------------------------------------------
# determinism and shape algebra
# ---------------------------------------------------------------------------

def _forward_backward(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, 4, 8)
    w = leaf(rng, 8, 8)
    gamma, beta = leaf(rng, 8), leaf(rng, 8)
    with Tape() as tape:
        h = T.gelu(T.matmul(x, w))
        h = T.layer_norm(h, gamma, beta)
        loss = T.sum_all(T.mul(h, h))
    tape.backward(loss)
    return loss.data.copy(), x.grad.copy(), w.grad.copy()


def test_forward_backward_bit_determinism():
    l1, gx1, gw1 = _forward_backward(7)
    l2, gx2, gw2 = _forward_backward(7)
    assert_array_equal(l1, l2)
    assert_array_equal(gx1, gx2)
    assert_array_equal(gw1, gw2)


@given(
    m=st.integers(1, 6), k=st.integers(1, 6), n=st.integers(1, 6),
    batch=st.lists(st.integers(1, 3), min_size=0, max_size=2),
)
def test_matmul_output_shape_is_function_of_input_shapes(m, k, n, batch):
    a = Tensor(np.zeros((*batch, m, k)))
    b = Tensor(np.zeros((*batch, k, n)))
    assert T.matmul(a, b).shape == (*batch, m, n)


@given(
    shape=st.lists(st.integers(1, 5), min_size=1, max_size=4),
    padding=st.data(),
)
def test_pad_slice_shapes(shape, padding):
    pads = [
        (padding.draw(st.integers(0, 2)), padding.draw(st.integers(0, 2)))
        for _ in shape
    ]
    x = Tensor(np.zeros(shape))
    out = T.pad(x, pads)
    assert out.shape == tuple(s + lo + hi for s, (lo, hi) in zip(shape, pads))
    crop = tuple(slice(lo, lo + s) for s, (lo, _) in zip(shape, pads))
    assert T.slice_(out, crop).shape == tuple(shape)


@given(st.lists(st.integers(1, 5), min_size=2, max_size=4))
def test_permute_reshape_shapes(shape):
    x = Tensor(np.zeros(shape))
    axes = tuple(reversed(range(len(shape))))
    p = T.permute(x, axes)
    assert p.shape == tuple(reversed(shape))
    assert T.reshape(p, (-1,)).shape == (int(np.prod(shape)),)


@given(
    c=st.integers(1, 4), h=st.integers(1, 9), w=st.integers(1, 9),
    k=st.integers(1, 3), stride=st.integers(1, 3), padding=st.integers(0, 2),
)
def test_conv2d_output_shape_formula(c, h, w, k, stride, padding):
    if h + 2 * padding < k or w + 2 * padding < k:
        return
    x = Tensor(np.zeros((c, h, w)))
    wt = Tensor(np.zeros((2, c, k, k)))
    b = Tensor(np.zeros(2))
    out = T.conv2d(x, wt, b, stride=stride, padding=padding)
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    assert out.shape == (2, ho, wo)
