import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ptqkit import quantizers as Q
from ptqkit.quantizers import QuantSpec
from ptqkit.tensor import ShapeError, make_rng

S4 = QuantSpec(4, 0.1)
P4 = QuantSpec(4, 0.125)  # grid points exactly representable


def grid_argmin(w, spec):
    """Exhaustive nearest-grid oracle; ties go to the even code."""
    ks = np.arange(spec.l, spec.h + 1)
    out = np.empty(len(w))
    for i, v in enumerate(w):
        d = np.abs(v / spec.scale - ks)
        cand = ks[d == d.min()]
        out[i] = spec.scale * (cand[cand % 2 == 0][0] if len(cand) > 1 else cand[0])
    return out


def test_spec_bounds():
    assert (S4.l, S4.h) == (-8, 7)
    u = QuantSpec(3, 1.0, signed=False)
    assert (u.l, u.h) == (0, 7)
    for bad in (dict(bits=1, scale=1.0), dict(bits=4, scale=0.0), dict(bits=4, scale=1.0, tau=0.0),
                dict(bits=4, scale=float("inf"))):
        with pytest.raises(ValueError):
            QuantSpec(**bad)


def test_nearest_examples():
    assert math.isclose(float(Q.quantize_nearest(np.array([0.26]), S4)[0]), 0.3, rel_tol=1e-6)
    assert math.isclose(float(Q.quantize_nearest(np.array([5.0]), S4)[0]), 0.7, rel_tol=1e-6)
    assert Q.quantize_nearest(np.array([0.25]), QuantSpec(4, 0.1)).tolist() == pytest.approx([0.2])


@pytest.mark.parametrize("bits,signed", [(2, True), (4, True), (4, False), (8, True)])
def test_nearest_matches_grid_oracle(bits, signed):
    rng = make_rng(bits)
    spec = QuantSpec(bits, 0.05, signed)
    w = rng.uniform(spec.scale * (spec.l - 3), spec.scale * (spec.h + 3), 1000)
    w[:50] = spec.scale * (rng.integers(spec.l, spec.h, 50) + 0.5)  # exact ties
    np.testing.assert_array_equal(Q.quantize_nearest(w, spec, dtype=np.float64), grid_argmin(w, spec))


def test_floor_ceil_examples_and_ordering():
    assert Q.quantize_floor(np.array([0.29]), S4).tolist() == pytest.approx([0.2])
    assert Q.quantize_ceil(np.array([0.21]), S4).tolist() == pytest.approx([0.3])
    on_grid = P4.scale * np.arange(P4.l, P4.h + 1, dtype=np.float64)
    assert np.array_equal(Q.quantize_floor(on_grid, P4), Q.quantize_ceil(on_grid, P4))
    assert np.array_equal(Q.quantize_floor(on_grid, P4), Q.quantize_nearest(on_grid, P4))
    w = make_rng(0).uniform(S4.scale * S4.l, S4.scale * S4.h, 1000)
    f, n, c = Q.quantize_floor(w, S4), Q.quantize_nearest(w, S4), Q.quantize_ceil(w, S4)
    assert np.all(f <= n) and np.all(n <= c)


def test_stochastic():
    on_grid = P4.scale * np.arange(P4.l, P4.h + 1, dtype=np.float64)
    assert np.array_equal(Q.quantize_stochastic(on_grid, P4, make_rng(0)), Q.quantize_nearest(on_grid, P4))
    spec = QuantSpec(4, 1.0)
    draws = Q.quantize_stochastic(np.full(10 ** 5, 2.6), spec, make_rng(1))
    assert abs((draws == 3.0).mean() - 0.6) <= 0.005
    w = 0.337
    d = Q.quantize_stochastic(np.full(10 ** 5, w), S4, make_rng(2)).astype(np.float64)
    assert abs(d.mean() - w) <= 3 * d.std() / math.sqrt(len(d))


def test_attention_forward_examples():
    w = np.array([0.26])
    assert Q.attention_forward(w, S4, Q.AlphaState.from_alpha(np.array([1.3]))).tolist() == pytest.approx([0.4])
    rng = make_rng(3)
    w = rng.standard_normal((5, 7)) * 0.3
    zero = Q.AlphaState.from_alpha(np.zeros_like(w))
    assert np.array_equal(Q.attention_forward(w, S4, zero), Q.quantize_nearest(w, S4))
    big = Q.AlphaState.from_alpha(np.full_like(w, 1e6))
    assert np.allclose(Q.attention_forward(w, S4, big), S4.scale * S4.h)
    with pytest.raises(ShapeError):
        Q.attention_forward(w, S4, Q.AlphaState.from_alpha(np.zeros(3)))


def test_attention_init():
    spec = QuantSpec(4, 0.1, tau=0.5)
    st_ = Q.attention_init((10 ** 6,), spec, make_rng(4))
    assert abs(st_.alpha.std() - 5.0) <= 0.02
    assert st_.alpha.shape == (10 ** 6,) and not st_.adam_m.any() and not st_.adam_v.any() and st_.step == 0
    a = Q.attention_init((3, 4), spec, make_rng(9)).alpha
    assert np.array_equal(a, Q.attention_init((3, 4), spec, make_rng(9)).alpha)
    tiny = QuantSpec(4, 0.1, tau=1e-9)
    w = make_rng(5).uniform(-0.7, 0.7, 200)
    w = w[np.abs(w / 0.1 - np.floor(w / 0.1) - 0.5) > 1e-3]
    state = Q.attention_init(w.shape, tiny, make_rng(6))
    assert np.abs(state.alpha).max() < 1e-6
    assert np.array_equal(Q.attention_forward(w, tiny, state), Q.quantize_nearest(w, tiny))


def test_gate_values():
    tau, s = 0.5, 0.1
    assert Q.attention_grad_gate(0.0, tau, s, 1) == 0.5
    assert Q.attention_grad_gate(0.0, tau, s, -1) == 0.5
    assert abs(Q.attention_grad_gate(3 * tau / s, tau, s, 1) - 0.99865) <= 1e-4
    assert Q.attention_grad_gate(-10 * tau / s, tau, s, 1) <= 1e-9
    assert Q.attention_grad_gate(-10 * tau / s, tau, s, -1) >= 1 - 1e-9
    with pytest.raises(ValueError):
        Q.attention_grad_gate(0.0, 0.0, s, 1)


@given(st.floats(-1e3, 1e3), st.floats(1e-3, 10), st.floats(1e-3, 10))
def test_gate_branches_are_complementary(alpha, tau, s):
    pos = Q.attention_grad_gate(alpha, tau, s, 1)
    neg = Q.attention_grad_gate(alpha, tau, s, -1)
    assert 0.0 <= pos <= 1.0 and 0.0 <= neg <= 1.0
    assert abs(pos + neg - 1.0) <= 1e-12


def test_gate_elementwise_matches_scalar():
    alpha = np.linspace(-20, 20, 41)
    signs = np.where(np.arange(41) % 2, 1.0, -1.0)
    vec = Q.attention_grad_gate(alpha, 0.5, 0.1, signs)
    assert np.array_equal(vec, [Q.attention_grad_gate(a, 0.5, 0.1, g) for a, g in zip(alpha, signs)])


def test_map_probability_examples():
    spec = QuantSpec(4, 1.0, tau=0.5)
    assert abs(Q.attention_map_probability(0.0, spec, 0) - 0.6826895) <= 1e-7
    assert abs(Q.attention_map_distribution(0.3, spec).sum() - 1.0) <= 1e-9
    sharp = QuantSpec(4, 0.1, tau=1e-6)
    assert Q.attention_map_probability(0.3, sharp, 3) > 1 - 1e-9
    with pytest.raises(ValueError):
        Q.attention_map_probability(0.0, spec, 8)


@settings(max_examples=50, deadline=None)
@given(st.floats(-2, 2), st.floats(0.01, 1), st.floats(0.01, 2), st.integers(2, 6))
def test_map_distribution_sums_to_one(w, s, tau, bits):
    p = Q.attention_map_distribution(w, QuantSpec(bits, s, tau=tau))
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-9


def test_map_probability_monte_carlo():
    rng = make_rng(7)
    for _ in range(5):
        s, tau = rng.uniform(0.05, 0.5), rng.uniform(0.02, 0.5)
        spec = QuantSpec(3, s, tau=tau)
        w = rng.uniform(s * spec.l, s * spec.h)
        alpha = Q.attention_init((10 ** 5,), spec, rng).alpha
        codes = np.clip(np.rint(w / s + alpha), spec.l, spec.h)
        for k, p in zip(range(spec.l, spec.h + 1), Q.attention_map_distribution(w, spec)):
            if p >= 1e-3:
                freq = (codes == k).mean()
                assert abs(freq - p) <= 3 * math.sqrt(p * (1 - p) / 10 ** 5) + 1e-4


def test_adaround_rectifier_and_reg():
    assert Q.adaround_rectifier(np.array([0.0]))[0] == pytest.approx(0.5)
    assert Q.adaround_rectifier(np.array([20.0]))[0] == 1.0
    assert Q.adaround_reg(np.array([20.0, -20.0]), 2.0) == 0.0
    assert Q.adaround_reg(np.array([0.0]), 2.0) == pytest.approx(1.0)
    v = np.linspace(-30, 30, 1001)
    h = Q.adaround_rectifier(v)
    assert h.min() == 0.0 and h.max() == 1.0 and np.all(np.diff(h) >= 0)
    assert Q.adaround_reg(v, 5.0) >= 0


def test_adaround_forward_limits():
    rng = make_rng(8)
    w = rng.uniform(-0.6, 0.6, (4, 6))
    w = w + 0.01 * (np.abs(w / 0.1 - np.rint(w / 0.1)) < 1e-3)
    down = Q.AdaRoundState(np.full_like(w, -20.0))
    up = Q.AdaRoundState(np.full_like(w, 20.0))
    assert np.array_equal(Q.adaround_forward(w, S4, down), Q.quantize_floor(w, S4))
    assert np.allclose(Q.adaround_forward(w, S4, up), Q.quantize_ceil(w, S4))
    mixed = Q.AdaRoundState(rng.choice([-20.0, 20.0], w.shape))
    hard = Q.adaround_hard(w, S4, mixed)
    assert np.all((hard == Q.quantize_floor(w, S4)) | (hard == Q.quantize_ceil(w, S4)))
    with pytest.raises(ShapeError):
        Q.adaround_forward(w, S4, Q.AdaRoundState(np.zeros(2)))


def test_adaround_init_reproduces_fraction():
    w = make_rng(9).uniform(-0.6, 0.6, 500)
    v = Q.adaround_init_v(w, S4)
    frac = w / S4.scale - np.floor(w / S4.scale)
    np.testing.assert_allclose(Q.adaround_rectifier(v), np.clip(frac, 1e-4, 1 - 1e-4), atol=1e-9)


def test_integer_codes():
    w_hat = Q.quantize_nearest(make_rng(10).standard_normal(100), S4)
    codes = Q.integer_codes(w_hat, S4)
    assert codes.min() >= S4.l and codes.max() <= S4.h
    np.testing.assert_allclose(codes * S4.scale, w_hat, rtol=1e-6)
