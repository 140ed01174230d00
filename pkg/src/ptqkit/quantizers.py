"""Uniform per-tensor rounders: nearest, floor, ceil, stochastic, AdaRound and attention round.

Every rounder computes ``s * clip(r(w / s), l, h)`` for some integer map ``r``.
``np.rint`` breaks ties half-to-even.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import F32, F64, ShapeError, erf, gaussian_cdf, rng_normal

_SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class QuantSpec:
    bits: int
    scale: float
    signed: bool = True
    tau: float = 0.5
    l: int = field(init=False)
    h: int = field(init=False)

    def __post_init__(self):
        if int(self.bits) != self.bits or self.bits < 2:
            raise ValueError(f"bits must be an integer >= 2, got {self.bits}")
        if not self.scale > 0 or not math.isfinite(self.scale):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.signed:
            lo, hi = -(2 ** (self.bits - 1)), 2 ** (self.bits - 1) - 1
        else:
            lo, hi = 0, 2 ** self.bits - 1
        object.__setattr__(self, "l", lo)
        object.__setattr__(self, "h", hi)

    def replace(self, **kw) -> "QuantSpec":
        args = dict(bits=self.bits, scale=self.scale, signed=self.signed, tau=self.tau)
        args.update(kw)
        return QuantSpec(**args)

    def to_dict(self) -> dict:
        return {"bits": self.bits, "scale": self.scale, "signed": self.signed, "tau": self.tau}


def _finish(k, spec, dtype=F32):
    return (spec.scale * np.clip(k, spec.l, spec.h)).astype(dtype)


def _ratio(w, spec):
    return np.asarray(w, dtype=F64) / spec.scale


def quantize_nearest(w, spec: QuantSpec, dtype=F32) -> np.ndarray:
    return _finish(np.rint(_ratio(w, spec)), spec, dtype)


def quantize_floor(w, spec: QuantSpec) -> np.ndarray:
    return _finish(np.floor(_ratio(w, spec)), spec)


def quantize_ceil(w, spec: QuantSpec) -> np.ndarray:
    return _finish(np.ceil(_ratio(w, spec)), spec)


def quantize_stochastic(w, spec: QuantSpec, rng) -> np.ndarray:
    """Round up with probability frac(w/s), down otherwise; sample, then clip."""
    r = _ratio(w, spec)
    lo = np.floor(r)
    up = rng.random(r.shape) < (r - lo)
    return _finish(lo + up, spec)


def integer_codes(w_hat, spec: QuantSpec) -> np.ndarray:
    """Grid indices of already-quantized values."""
    return np.rint(np.asarray(w_hat, dtype=F64) / spec.scale).astype(np.int64)


# -- attention round -----------------------------------------------------------------

@dataclass
class AlphaState:
    """Trainable, unbounded rounding perturbation in grid units, with Adam moments."""

    alpha: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray
    step: int = 0

    @classmethod
    def from_alpha(cls, alpha):
        alpha = np.asarray(alpha, dtype=F64)
        return cls(alpha, np.zeros_like(alpha), np.zeros_like(alpha), 0)


def attention_init(weight_shape, spec: QuantSpec, rng) -> AlphaState:
    """alpha ~ N(0, (tau/s)^2) elementwise."""
    shape = tuple(weight_shape)
    alpha = rng_normal(rng, 0.0, spec.tau / spec.scale, shape).astype(F64)
    return AlphaState.from_alpha(alpha)


def _check_shape(w, state_arr):
    if np.shape(w) != np.shape(state_arr):
        raise ShapeError(f"weight shape {np.shape(w)} != state shape {np.shape(state_arr)}")


def attention_codes(w, spec: QuantSpec, alpha) -> np.ndarray:
    """Unclipped integer codes round(w/s + alpha)."""
    return np.rint(_ratio(w, spec) + alpha)


def attention_forward(w, spec: QuantSpec, state: AlphaState) -> np.ndarray:
    _check_shape(w, state.alpha)
    return _finish(attention_codes(w, spec, state.alpha), spec)


def attention_grad_gate(alpha, tau: float, s: float, loss_grad_sign):
    """Gate on d(loss)/d(alpha): 0.5 +- 0.5 erf(alpha / (sqrt(2) tau / s)).

    The ``+`` branch applies where the upstream gradient is positive (the step
    will lower alpha), the ``-`` branch elsewhere. Works elementwise on arrays.
    """
    if not tau > 0 or not s > 0:
        raise ValueError("tau and s must be positive")
    e = erf(np.asarray(alpha, dtype=F64) / (_SQRT2 * tau / s))
    gate = np.where(np.asarray(loss_grad_sign) > 0, 0.5 + 0.5 * e, 0.5 - 0.5 * e)
    return float(gate) if gate.ndim == 0 else gate


def attention_map_probability(w: float, spec: QuantSpec, k: int) -> float:
    """Probability that w + N(0, tau^2) rounds to grid point k.

    The end bins absorb the tails, so probabilities over [l, h] sum to one.
    """
    if not spec.l <= k <= spec.h or int(k) != k:
        raise ValueError(f"grid index {k} outside [{spec.l}, {spec.h}]")
    s = spec.scale
    lower = -math.inf if k == spec.l else s * (k - 0.5)
    upper = math.inf if k == spec.h else s * (k + 0.5)
    p_hi = 1.0 if upper == math.inf else gaussian_cdf(upper, w, spec.tau)
    p_lo = 0.0 if lower == -math.inf else gaussian_cdf(lower, w, spec.tau)
    return max(p_hi - p_lo, 0.0)


def attention_map_distribution(w: float, spec: QuantSpec) -> np.ndarray:
    """Bin probabilities for every grid index l..h."""
    return np.array([attention_map_probability(w, spec, k) for k in range(spec.l, spec.h + 1)])


# -- AdaRound --------------------------------------------------------------------------

@dataclass
class AdaRoundState:
    V: np.ndarray
    zeta: float = 1.1
    gamma_r: float = -0.1
    lam: float = 0.01
    beta: float = 20.0


def adaround_rectifier(V, zeta: float = 1.1, gamma_r: float = -0.1) -> np.ndarray:
    """h(V) = clip(sigmoid(V) * (zeta - gamma) + gamma, 0, 1)."""
    sig = 0.5 * (1.0 + np.tanh(0.5 * np.asarray(V, dtype=F64)))
    return np.clip(sig * (zeta - gamma_r) + gamma_r, 0.0, 1.0)


def adaround_reg(V, beta: float, zeta: float = 1.1, gamma_r: float = -0.1) -> float:
    """sum(1 - |2 h(V) - 1| ** beta); zero iff every h(V) is 0 or 1."""
    hv = adaround_rectifier(V, zeta, gamma_r)
    return float(np.sum(1.0 - np.abs(2.0 * hv - 1.0) ** beta))


def adaround_init_v(w, spec: QuantSpec, zeta: float = 1.1, gamma_r: float = -0.1) -> np.ndarray:
    """V such that h(V) equals the fractional part of w/s."""
    r = _ratio(w, spec)
    frac = np.clip(r - np.floor(r), 1e-4, 1 - 1e-4)
    sig = (frac - gamma_r) / (zeta - gamma_r)
    return -np.log(1.0 / sig - 1.0)


def adaround_forward(w, spec: QuantSpec, state: AdaRoundState) -> np.ndarray:
    _check_shape(w, state.V)
    soft = np.floor(_ratio(w, spec)) + adaround_rectifier(state.V, state.zeta, state.gamma_r)
    return _finish(soft, spec)


def adaround_hard(w, spec: QuantSpec, state: AdaRoundState) -> np.ndarray:
    """Final grid values: floor(w/s) + [h(V) >= 0.5]."""
    _check_shape(w, state.V)
    up = adaround_rectifier(state.V, state.zeta, state.gamma_r) >= 0.5
    return _finish(np.floor(_ratio(w, spec)) + up, spec)


ROUNDERS = ("nearest", "floor", "ceil", "stochastic", "adaround", "attention")
