"""
Rounding a handful of weights
=============================

Every rounder maps a weight onto the same uniform grid; they differ only in
how they pick the integer.
"""
import numpy as np

from ptqkit import QuantSpec, attention_forward, attention_init, quantize_nearest
from ptqkit.quantizers import (attention_grad_gate, attention_map_distribution, quantize_ceil, quantize_floor,
                               quantize_stochastic)
from ptqkit.tensor import make_rng

# a 3-bit signed grid with step 0.1 covers -0.4 .. 0.3
spec = QuantSpec(bits=3, scale=0.1, tau=0.05)
w = np.array([-0.52, -0.13, 0.04, 0.16, 0.26, 0.41])
rng = make_rng(0)

print("w          ", w)
print("nearest    ", quantize_nearest(w, spec))
print("floor      ", quantize_floor(w, spec))
print("ceil       ", quantize_ceil(w, spec))
print("stochastic ", quantize_stochastic(w, spec, rng))

# %%
# Attention round adds a random perturbation alpha (in grid units) before
# rounding. Before any training, a weight lands on nearby grid points with
# Gaussian probabilities; a sample of many draws shows the same picture.
state = attention_init((100000,), spec, rng)
hits = attention_forward(np.full(100000, 0.15), spec, state)
values, counts = np.unique(hits, return_counts=True)
print("\nw = 0.15, tau = 0.05")
for k, p in zip(range(spec.l, spec.h + 1), attention_map_distribution(0.15, spec)):
    if p > 1e-4:
        seen = counts[np.isclose(values, k * spec.scale)].sum() / 100000
        print(f"  grid {k:+d}: predicted {p:.4f}  sampled {seen:.4f}")

# %%
# During calibration the gradient on alpha is scaled by a gate that is near 1
# when the step moves alpha back toward zero and near 0 when it would push it
# further out. That keeps each weight close to its own grid neighbourhood.
alpha = np.linspace(-2, 2, 9)
print("\nalpha       ", alpha)
print("gate (g > 0)", np.round(attention_grad_gate(alpha, spec.tau, spec.scale, 1), 3))
print("gate (g < 0)", np.round(attention_grad_gate(alpha, spec.tau, spec.scale, -1), 3))
