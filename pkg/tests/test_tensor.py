import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ptqkit.tensor import (ShapeError, col2im, conv2d, erf, gaussian_cdf, im2col, make_rng, matmul,
                           rng_normal)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += float(a[i, k]) * float(b[k, j])
    return out


def naive_conv(x, w, stride, pad):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh, ow = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for b in range(n):
        for f in range(o):
            for i in range(oh):
                for j in range(ow):
                    for ch in range(c):
                        for u in range(k):
                            for v in range(k):
                                out[b, f, i, j] += xp[b, ch, i * stride + u, j * stride + v] * w[f, ch, u, v]
    return out


def test_matmul_small_cases():
    a = np.array([[1, 2], [3, 4]], dtype=np.float32)
    assert np.array_equal(matmul(np.eye(2, dtype=np.float32), a), a)
    assert matmul(np.array([[1, 2]], np.float32), np.array([[3], [4]], np.float32)).tolist() == [[11.0]]


def test_matmul_against_triple_loop():
    rng = make_rng(1)
    a = rng.standard_normal((16, 16)).astype(np.float32)
    b = rng.standard_normal((16, 16)).astype(np.float32)
    np.testing.assert_allclose(matmul(a, b), naive_matmul(a, b), rtol=1e-6, atol=1e-6)


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError):
        matmul(np.ones(3), np.ones((3, 1)))


def test_conv_trivial_kernels():
    x = np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3)
    assert np.array_equal(conv2d(x, np.full((1, 1, 1, 1), 2, np.float32)), 2 * x)
    delta = np.zeros((1, 1, 3, 3), np.float32)
    delta[0, 0, 1, 1] = 1
    assert np.array_equal(conv2d(x, delta, pad=1), x)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_against_direct_loops(stride, pad):
    rng = make_rng(2)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    np.testing.assert_allclose(conv2d(x, w, stride, pad), naive_conv(x, w, stride, pad), rtol=1e-5, atol=1e-5)


def test_conv_shape_errors():
    with pytest.raises(ShapeError):
        conv2d(np.ones((1, 2, 5, 5)), np.ones((1, 3, 3, 3)))
    with pytest.raises(ShapeError):
        conv2d(np.ones((1, 1, 2, 2)), np.ones((1, 1, 3, 3)))


def test_col2im_is_adjoint_of_im2col():
    rng = make_rng(3)
    x = rng.standard_normal((2, 3, 7, 7))
    cols = im2col(x, 3, 2, 1)
    y = rng.standard_normal(cols.shape)
    lhs = np.sum(cols * y)
    rhs = np.sum(x * col2im(y, x.shape, 3, 2, 1))
    assert math.isclose(lhs, rhs, rel_tol=1e-10)


def test_erf_values():
    assert erf(0.0) == 0.0
    assert abs(erf(10.0) - 1.0) < 1e-9
    assert abs(erf(1.0) - 0.8427007929497149) < 1e-7
    xs = np.linspace(-4, 4, 101)
    np.testing.assert_allclose(erf(xs), [math.erf(v) for v in xs], atol=1e-7)


@given(st.floats(-50, 50, allow_nan=False))
def test_erf_is_odd_and_bounded(x):
    assert erf(-x) == -erf(x)
    assert -1.0 <= erf(x) <= 1.0


def test_gaussian_cdf():
    assert gaussian_cdf(1.5, 1.5, 2.0) == 0.5
    assert abs(gaussian_cdf(3.0, 1.0, 2.0) - 0.8413447) < 1e-7
    assert gaussian_cdf(-1e6, 0.0, 1.0) == 0.0
    with pytest.raises(ValueError):
        gaussian_cdf(0.0, 0.0, 0.0)


def test_rng_normal():
    assert np.all(rng_normal(make_rng(0), 3.5, 0.0, 10) == np.float32(3.5))
    assert np.array_equal(rng_normal(make_rng(42), 0, 1, 100), rng_normal(make_rng(42), 0, 1, 100))
    var = rng_normal(make_rng(5), 0.0, 1.0, 10 ** 6).astype(np.float64).var()
    assert 0.99 <= var <= 1.01
    with pytest.raises(ValueError):
        rng_normal(make_rng(0), 0, -1, 3)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 9), st.sampled_from([1, 3]), st.integers(1, 2))
def test_conv_matches_loops_on_random_shapes(n, c, size, k, stride):
    rng = make_rng([n, c, size, k, stride])
    x = rng.standard_normal((n, c, size, size)).astype(np.float32)
    w = rng.standard_normal((2, c, k, k)).astype(np.float32)
    pad = k // 2
    np.testing.assert_allclose(conv2d(x, w, stride, pad), naive_conv(x, w, stride, pad), rtol=1e-5, atol=1e-5)
