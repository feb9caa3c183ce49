import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from marginfsl.tensor import (NumericError, ShapeError, finite_diff_grad, grad_rel_error,
                              l2_normalize, l2_normalize_backward, log_softmax_rows, matmul,
                              softmax_rows)

finite = st.floats(-50, 50, allow_nan=False)


def test_matmul_examples():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(np.eye(2), m), m)
    assert np.array_equal(matmul(np.zeros((2, 3)), np.ones((3, 4))), np.zeros((2, 4)))
    assert np.array_equal(matmul(m, [[5.0], [6.0]]), [[17.0], [39.0]])


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_associative(rng):
    for _ in range(20):
        a, b, c = rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=(5, 2))
        left, right = matmul(matmul(a, b), c), matmul(a, matmul(b, c))
        assert np.max(np.abs(left - right)) <= 1e-9 * np.max(np.abs(left))


def test_softmax_examples():
    assert np.allclose(softmax_rows([[0.0, 0.0, 0.0]]), 1 / 3, atol=1e-15)
    assert np.array_equal(softmax_rows([[1000.0, 1000.0]]), [[0.5, 0.5]])
    # e/(e+1), 1/(e+1)
    assert np.allclose(softmax_rows([[1.0, 0.0]]), [[0.731058578630004879, 0.268941421369995121]],
                       atol=1e-15)


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=finite),
       st.floats(-1e3, 1e3))
def test_softmax_rows_sum_and_shift(m, c):
    p = softmax_rows(m)
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.max(np.abs(softmax_rows(m + c) - p)) <= 1e-12


def test_log_softmax_matches_log_of_softmax(rng):
    m = rng.normal(0, 3, (4, 6))
    assert np.allclose(log_softmax_rows(m), np.log(softmax_rows(m)), atol=1e-12)


def test_finite_diff_examples():
    assert np.array_equal(finite_diff_grad(lambda x: 3.0, np.array([1.0, 2.0])), [0.0, 0.0])
    g = finite_diff_grad(lambda x: 0.5 * x @ x, np.array([1.0, 2.0]), eps=1e-5)
    assert np.allclose(g, [1.0, 2.0], atol=1e-8)
    g = finite_diff_grad(lambda x: x[0] * x[1], np.array([3.0, 4.0]))
    assert np.allclose(g, [4.0, 3.0], atol=1e-8)


def test_finite_diff_quadratic(rng):
    for _ in range(20):
        n = int(rng.integers(1, 8))
        a = rng.normal(size=(n, n))
        x = rng.normal(size=n)
        g = finite_diff_grad(lambda v: 0.5 * v @ a @ v, x, eps=1e-5)
        assert grad_rel_error(0.5 * (a + a.T) @ x, g) <= 1e-6


def test_finite_diff_non_finite():
    with pytest.raises(NumericError):
        finite_diff_grad(lambda x: math.inf, np.zeros(2))
    with pytest.raises(ValueError):
        finite_diff_grad(lambda x: 0.0, np.zeros(2), eps=0)


def test_finite_diff_leaves_input_untouched():
    x = np.array([1.0, 2.0])
    finite_diff_grad(lambda v: v.sum(), x)
    assert np.array_equal(x, [1.0, 2.0])


def test_grad_rel_error_floor():
    assert grad_rel_error([1e-12], [0.0]) == 0.0
    assert grad_rel_error([1.0], [1.1]) == pytest.approx(0.1 / 1.1)
    with pytest.raises(ShapeError):
        grad_rel_error([1.0], [1.0, 2.0])


def test_l2_normalize_and_backward(rng):
    x = rng.normal(size=(4, 3))
    u, n = l2_normalize(x)
    assert np.allclose(np.linalg.norm(u, axis=1), 1.0, atol=1e-15)
    g = rng.normal(size=(4, 3))
    num = finite_diff_grad(lambda v: np.sum(l2_normalize(v.reshape(4, 3))[0] * g), x.ravel())
    assert grad_rel_error(l2_normalize_backward(u, n, g), num) <= 1e-6
    with pytest.raises(NumericError):
        l2_normalize(np.zeros((1, 3)))
