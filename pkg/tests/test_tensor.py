import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from lidarfuse.errors import ContractError, DimensionError
from lidarfuse.tensor import (
    Tensor,
    concat,
    conv2d,
    grad_check,
    grad_check_params,
    linear,
    log_softmax,
    segment_max,
    softmax,
    spmm,
    take_rows,
)

finite = st.floats(-3, 3, allow_nan=False, width=64)


def test_linear_matches_loop_oracle(rng):
    x, w, b = rng.normal(size=(5, 3)), rng.normal(size=(3, 4)), rng.normal(size=4)
    out = linear(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(out, oracles.linear(x, w, b), atol=1e-12)


def test_linear_dimension_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_backward_rejects_non_scalar():
    t = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (t * 2).backward()


def test_ndarray_on_left_dispatches_to_tensor():
    t = Tensor(np.ones(3), requires_grad=True)
    out = np.full(3, 2.0) * t
    assert isinstance(out, Tensor)
    out.sum().backward()
    np.testing.assert_array_equal(t.grad, np.full(3, 2.0))


def test_gradient_accumulates_over_reuse():
    t = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (t * t + t).sum().backward()
    np.testing.assert_allclose(t.grad, 2 * t.data + 1)


@pytest.mark.parametrize(
    "fn",
    [
        lambda t: (t * t).sum(),
        lambda t: (t.exp() / (1 + t.exp())).sum(),
        lambda t: t.sigmoid().log().sum(),
        lambda t: (t.abs() + 0.1).log().sum(),
        lambda t: (t**3).mean(),
        lambda t: softmax(t.reshape(2, 3), axis=1)[:, 0].sum(),
        lambda t: log_softmax(t.reshape(3, 2), axis=0).sum(),
        lambda t: t.reshape(2, 3).transpose().sum(axis=0)[1],
        lambda t: (t.reshape(2, 3) @ Tensor(np.arange(6.0).reshape(3, 2))).relu().sum(),
        lambda t: concat([t.reshape(2, 3), t.reshape(2, 3) * 2], axis=1)[:, 2:5].sum(),
        lambda t: take_rows(t.reshape(3, 2), np.array([0, 2, 2, 1]))[2:].sum(),
    ],
)
def test_grad_check_elementary(fn, rng):
    assert grad_check(fn, rng.normal(size=6) + 0.05) < 1e-6


def test_conv2d_matches_direct_sum(rng):
    x, w, b = rng.normal(size=(4, 5, 2)), rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    pad = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    ref = np.zeros((4, 5, 3))
    for i in range(4):
        for j in range(5):
            for o in range(3):
                ref[i, j, o] = b[o] + np.sum(pad[i : i + 3, j : j + 3, :] * w[:, :, :, o])
    np.testing.assert_allclose(out, ref, atol=1e-12)
    assert grad_check(lambda t: (conv2d(t, Tensor(w)) ** 2).sum(), x) < 1e-6
    assert grad_check(lambda t: (conv2d(Tensor(x), t) ** 2).sum(), w) < 1e-6


def test_segment_max_forward_and_grad(rng):
    x = rng.normal(size=(7, 3))
    seg = np.array([0, 2, 2, 0, 1, 2, 0])
    out = segment_max(Tensor(x), seg, 4).data
    for s in range(3):
        np.testing.assert_array_equal(out[s], x[seg == s].max(axis=0))
    np.testing.assert_array_equal(out[3], 0.0)  # empty segment
    assert grad_check(lambda t: (segment_max(t, seg, 4) ** 2).sum(), x) < 1e-6


def test_segment_max_tie_goes_to_lowest_index():
    x = Tensor(np.array([[1.0], [1.0]]), requires_grad=True)
    segment_max(x, np.array([0, 0]), 1).sum().backward()
    np.testing.assert_array_equal(x.grad, [[1.0], [0.0]])


def test_spmm_grad(rng):
    mat = sp.random(4, 6, density=0.5, random_state=1, format="csr")
    assert grad_check(lambda t: (spmm(mat, t) ** 2).sum(), rng.normal(size=(6, 2))) < 1e-6


def test_grad_check_params_matches_leaf_check(rng):
    w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    x = Tensor(rng.normal(size=(4, 3)))
    assert grad_check_params(lambda: (linear(x, w) ** 2).sum(), {"w": w}) < 1e-6


@given(arrays(np.float64, (3, 4), elements=finite))
def test_softmax_rows_sum_to_one(x):
    p = softmax(Tensor(x), axis=1).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(p > 0)


@given(arrays(np.float64, (2, 5), elements=finite), arrays(np.float64, (2, 5), elements=finite))
def test_addition_gradient_is_ones(a, b):
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    (ta + tb).sum().backward()
    np.testing.assert_array_equal(ta.grad, 1.0)
    np.testing.assert_array_equal(tb.grad, 1.0)
