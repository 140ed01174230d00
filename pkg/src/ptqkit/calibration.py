"""Scale search, per-layer reconstruction calibration and sequential model quantization."""
from __future__ import annotations

import time
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import quantizers as Q
from .errors import ConfigError
from .graph import Conv2d, Linear, ModelGraph, ReLU, WEIGHTED, apply_layer
from .quantizers import QuantSpec
from .tensor import F32, F64, im2col, make_rng


class CalibrationError(RuntimeError):
    pass


@dataclass
class HyperParams:
    lr: float = 4e-4
    iters: int = 2000
    batch: int = 64
    calib_size: int = 1024
    tau: float = 0.5
    # "step": tau is measured in quantization steps, so the weight-domain noise
    # scale handed to QuantSpec is tau * s; "weight": tau is used as is
    tau_units: str = "step"
    first_last_bits: int = 8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    # reconstruction loss on the whole calibration pool is checked this often
    eval_every: int = 100
    # AdaRound baseline
    adaround_lr: float = 1e-2
    zeta: float = 1.1
    gamma_r: float = -0.1
    lam: float = 0.01
    beta_start: float = 20.0
    beta_end: float = 2.0
    warmup: float = 0.2

    def __post_init__(self):
        for name in ("iters", "batch", "calib_size", "first_last_bits", "eval_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.lr < 0 or self.adaround_lr < 0:
            raise ConfigError("learning rates must be nonnegative")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.tau_units not in ("step", "weight"):
            raise ConfigError(f"tau_units must be 'step' or 'weight', got {self.tau_units!r}")

    def weight_tau(self, scale) -> float:
        return self.tau * scale if self.tau_units == "step" else self.tau

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CalibRecord:
    layer: str
    rounder: str
    bits_w: int
    scale: float
    initial_loss: float
    final_loss: float
    trajectory: list = field(default_factory=list)
    seconds: float = 0.0
    bits_a: int | None = None


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def step(self, param, grad, m, v, t):
        """In-place update of ``param``; ``t`` is the 1-based step count."""
        m *= self.beta1
        m += (1 - self.beta1) * grad
        v *= self.beta2
        v += (1 - self.beta2) * grad * grad
        mhat = m / (1 - self.beta1 ** t)
        vhat = v / (1 - self.beta2 ** t)
        param -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# -- scale search ------------------------------------------------------------------------

SCALE_GRID = 100


def search_scale(W, bits, signed=True) -> float:
    """MSE-optimal scale for round-to-nearest over a 100-point grid in [0.2 m, m],
    m = max|W| / max(|l|, h). An all-zero tensor gets scale 1."""
    w = np.asarray(W, dtype=F64).ravel()
    if w.size == 0:
        raise ValueError("cannot search a scale for an empty tensor")
    probe = QuantSpec(bits, 1.0, signed)
    m = np.abs(w).max() / max(abs(probe.l), probe.h)
    if m == 0:
        return 1.0
    best_s, best_err = None, np.inf
    for s in np.linspace(0.2 * m, m, SCALE_GRID):
        err = float(np.sum((w - s * np.clip(np.rint(w / s), probe.l, probe.h)) ** 2))
        if err < best_err:
            best_s, best_err = float(s), err
    return best_s


# -- per-layer problem ------------------------------------------------------------------

class LayerData:
    """Calibration inputs for one Linear/Conv2d layer, unfolded to (N, P, D) patches,
    plus the full-precision outputs they produce."""

    def __init__(self, W, bias, x, layer=None):
        W = np.asarray(W, dtype=F32)
        x = np.asarray(x)
        if W.ndim == 4:
            stride = getattr(layer, "stride", 1)
            pad = getattr(layer, "pad", 0)
            self.cols = im2col(x.astype(F32), W.shape[-1], stride, pad)
        elif W.ndim == 2:
            self.cols = x.reshape(len(x), 1, -1).astype(F32)
        else:
            raise ValueError(f"unsupported weight rank {W.ndim}")
        self.shape = W.shape
        self.bias = None if bias is None else np.asarray(bias, dtype=F64)
        self.n = len(x)
        self.target = self.outputs(W.reshape(W.shape[0], -1))

    def outputs(self, wmat, idx=None, chunk=128):
        wmat = np.asarray(wmat, dtype=F64).reshape(self.shape[0], -1)
        if idx is not None:
            return self._out(self.cols[idx], wmat)
        return np.concatenate([self._out(self.cols[i:i + chunk], wmat) for i in range(0, self.n, chunk)])

    def _out(self, cols, wmat):
        y = cols.astype(F64) @ wmat.T
        if self.bias is not None:
            y += self.bias
        return y

    def loss(self, w_hat) -> float:
        """Mean squared reconstruction error over the whole pool."""
        total = 0.0
        wmat = np.asarray(w_hat, dtype=F64).reshape(self.shape[0], -1)
        for i in range(0, self.n, 128):
            d = self._out(self.cols[i:i + 128], wmat) - self.target[i:i + 128]
            total += float(np.sum(d * d))
        return total / self.target.size

    def batch_grad(self, w_hat, idx):
        """Batch MSE and its gradient with respect to the (scaled) weights."""
        wmat = np.asarray(w_hat, dtype=F64).reshape(self.shape[0], -1)
        cols = self.cols[idx].astype(F64)
        diff = self._out(cols, wmat) - self.target[idx]
        loss = float(np.mean(diff * diff))
        g = 2.0 * diff / diff.size
        grad = g.reshape(-1, g.shape[-1]).T @ cols.reshape(-1, cols.shape[-1])
        return loss, grad.reshape(self.shape)


def _as_data(W, bias, x_cal, layer):
    return x_cal if isinstance(x_cal, LayerData) else LayerData(W, bias, x_cal, layer)


# -- attention round ---------------------------------------------------------------------

def attention_alpha_grad(w, spec, alpha, grad_w):
    """d(loss)/d(alpha) given d(loss)/d(w_hat): straight-through rounding,
    zero where the clip is active, times s, times the erf gate."""
    codes = Q.attention_codes(w, spec, alpha)
    inside = (codes >= spec.l) & (codes <= spec.h)
    g = grad_w * spec.scale * inside
    return g * Q.attention_grad_gate(alpha, spec.tau, spec.scale, np.sign(g))


def calibrate_layer(W, bias, x_cal, spec: QuantSpec, hyper: HyperParams, rng, layer=None, name="layer", on_step=None):
    """Fit the attention-round perturbation of one layer by Adam on the batch MSE
    between quantized and full-precision outputs.

    Returns ``(state, record)``; ``state.alpha`` is the best perturbation seen at
    the pool-loss checkpoints (initialization included). ``on_step(t, old, new)``
    is called after each update.
    """
    t0 = time.perf_counter()
    data = _as_data(W, bias, x_cal, layer)
    w = np.asarray(W, dtype=F64)
    state = Q.attention_init(w.shape, spec, rng)
    adam = Adam(hyper.lr, hyper.adam_beta1, hyper.adam_beta2, hyper.adam_eps)

    def pool_loss(alpha):
        loss = data.loss(Q.attention_forward(w, spec, Q.AlphaState.from_alpha(alpha)))
        if not np.isfinite(loss):
            raise CalibrationError(f"non-finite reconstruction loss in layer {name!r}")
        return loss

    initial = pool_loss(state.alpha)
    best, best_alpha = initial, state.alpha.copy()
    trajectory = [(0, initial)]
    for t in range(1, hyper.iters + 1):
        idx = rng.integers(0, data.n, hyper.batch)
        w_hat = Q.attention_forward(w, spec, state)
        loss, grad_w = data.batch_grad(w_hat, idx)
        if not np.isfinite(loss):
            raise CalibrationError(f"non-finite reconstruction loss in layer {name!r} at step {t}")
        grad = attention_alpha_grad(w, spec, state.alpha, grad_w)
        old = state.alpha.copy() if on_step else None
        state.step = t
        adam.step(state.alpha, grad, state.adam_m, state.adam_v, t)
        if on_step:
            on_step(t, old, state.alpha)
        if t % hyper.eval_every == 0 or t == hyper.iters:
            current = pool_loss(state.alpha)
            trajectory.append((t, current))
            if current < best:
                best, best_alpha = current, state.alpha.copy()
    state.alpha = best_alpha
    record = CalibRecord(name, "attention", spec.bits, spec.scale, initial, best, trajectory, time.perf_counter() - t0)
    return state, record


# -- AdaRound baseline ---------------------------------------------------------------------

def _beta_at(t, hyper):
    start = hyper.warmup * hyper.iters
    if t < start:
        return hyper.beta_start
    rel = (t - start) / max(hyper.iters - start, 1)
    return hyper.beta_end + (hyper.beta_start - hyper.beta_end) * max(0.0, 1.0 - rel)


def calibrate_adaround_layer(W, bias, x_cal, spec: QuantSpec, hyper: HyperParams, rng, layer=None, name="layer"):
    """Optimize V on sum-of-squares reconstruction + lam * f(V) with beta annealed.

    The regularizer is off during the warm-up fraction. Returns
    ``(w_hat, state, record)`` where ``w_hat`` is the best hard-rounded weight seen
    at the checkpoints and ``state`` holds the final V.
    """
    t0 = time.perf_counter()
    data = _as_data(W, bias, x_cal, layer)
    w = np.asarray(W, dtype=F64)
    state = Q.AdaRoundState(Q.adaround_init_v(w, spec, hyper.zeta, hyper.gamma_r), hyper.zeta, hyper.gamma_r, hyper.lam, hyper.beta_start)
    m, v = np.zeros_like(state.V), np.zeros_like(state.V)
    adam = Adam(hyper.adaround_lr, hyper.adam_beta1, hyper.adam_beta2, hyper.adam_eps)
    floor = np.floor(w / spec.scale)
    span = hyper.zeta - hyper.gamma_r
    # squared error summed over one sample's outputs, matching ||w x - w_hat x||_F^2
    per_sample = data.target[0].size

    def hard_loss():
        loss = data.loss(Q.adaround_hard(w, spec, state))
        if not np.isfinite(loss):
            raise CalibrationError(f"non-finite reconstruction loss in layer {name!r}")
        return loss

    best_w = Q.adaround_hard(w, spec, state)
    initial = best = hard_loss()
    trajectory = [(0, initial)]
    for t in range(1, hyper.iters + 1):
        idx = rng.integers(0, data.n, hyper.batch)
        hv = Q.adaround_rectifier(state.V, hyper.zeta, hyper.gamma_r)
        soft = floor + hv
        w_soft = spec.scale * np.clip(soft, spec.l, spec.h)
        loss, grad_w = data.batch_grad(w_soft, idx)
        if not np.isfinite(loss):
            raise CalibrationError(f"non-finite reconstruction loss in layer {name!r} at step {t}")
        g_h = grad_w * per_sample * spec.scale * ((soft >= spec.l) & (soft <= spec.h))
        beta = _beta_at(t, hyper)
        state.beta = beta
        if t >= hyper.warmup * hyper.iters:
            d = 2.0 * hv - 1.0
            g_h = g_h - hyper.lam * beta * np.abs(d) ** (beta - 1.0) * np.sign(d) * 2.0
        sig = 0.5 * (1.0 + np.tanh(0.5 * state.V))
        active = (hv > 0.0) & (hv < 1.0)
        grad_v = g_h * sig * (1.0 - sig) * span * active
        adam.step(state.V, grad_v, m, v, t)
        if t % hyper.eval_every == 0 or t == hyper.iters:
            current = hard_loss()
            trajectory.append((t, current))
            if current < best:
                best, best_w = current, Q.adaround_hard(w, spec, state)
    record = CalibRecord(name, "adaround", spec.bits, spec.scale, initial, best, trajectory, time.perf_counter() - t0)
    return best_w.astype(F32), state, record


# -- activations -----------------------------------------------------------------------------

def activation_taps(model: ModelGraph) -> dict:
    """Map each weighted layer to the tensor whose values get quantized:
    the following ReLU when there is one (unsigned), else the layer itself (signed)."""
    taps = {}
    for i, layer in enumerate(model.layers):
        if isinstance(layer, WEIGHTED):
            nxt = model.layers[i + 1] if i + 1 < len(model.layers) else None
            taps[layer.name] = (nxt.name, False) if isinstance(nxt, ReLU) else (layer.name, True)
    return taps


def activation_spec(values, bits, signed) -> QuantSpec:
    return QuantSpec(bits, search_scale(values, bits, signed), signed)


def calibrate_activations(model: ModelGraph, x_cal, bits_act) -> dict:
    """Static per-tensor activation quantizers for every weighted layer's output.

    Earlier quantizers are applied while collecting later activations.
    """
    taps = {tap: signed for tap, signed in activation_taps(model).values()}
    q = model.copy()
    q.act_specs = {}
    h = np.asarray(x_cal, dtype=F64)
    for layer in q.layers:
        h = apply_layer(q, layer, h)
        if layer.name in taps:
            q.act_specs[layer.name] = activation_spec(h, bits_act, taps[layer.name])
            h = Q.quantize_nearest(h, q.act_specs[layer.name], dtype=F64)
    return q.act_specs


# -- whole model -----------------------------------------------------------------------------

def weight_checksum(arr) -> str:
    return f"{zlib.crc32(np.ascontiguousarray(arr, dtype=F32).tobytes()) & 0xFFFFFFFF:08x}"


def effective_bits(model: ModelGraph, bit_assignment: dict, first_last_bits: int) -> dict:
    """Per-layer weight bits with the first and last weighted layers overridden."""
    names = [layer.name for layer in model.weighted_layers()]
    missing = [n for n in names if n not in bit_assignment]
    if missing:
        raise ConfigError(f"bit assignment missing layers {missing}")
    bits = {n: int(bit_assignment[n]) for n in names}
    if first_last_bits:
        bits[names[0]] = bits[names[-1]] = int(first_last_bits)
    return bits


def quantize_layer_weights(rounder, W, bias, data, spec, hyper, rng, name):
    """Run one rounder on one layer; returns (w_hat, record, extras)."""
    t0 = time.perf_counter()
    if rounder == "attention":
        state, rec = calibrate_layer(W, bias, data, spec, hyper, rng, name=name)
        w_hat = Q.attention_forward(W, spec, state)
        return w_hat, rec, {"alpha": state.alpha}
    if rounder == "adaround":
        w_hat, _, rec = calibrate_adaround_layer(W, bias, data, spec, hyper, rng, name=name)
        return w_hat, rec, {}
    if rounder == "nearest":
        w_hat = Q.quantize_nearest(W, spec)
    elif rounder == "floor":
        w_hat = Q.quantize_floor(W, spec)
    elif rounder == "ceil":
        w_hat = Q.quantize_ceil(W, spec)
    elif rounder == "stochastic":
        w_hat = Q.quantize_stochastic(W, spec, rng)
    else:
        raise ConfigError(f"unknown rounder {rounder!r}; expected one of {Q.ROUNDERS}")
    loss = data.loss(w_hat)
    rec = CalibRecord(name, rounder, spec.bits, spec.scale, loss, loss, [(0, loss)], time.perf_counter() - t0)
    return w_hat, rec, {}


def quantize_model(model: ModelGraph, calib_images, bit_assignment: dict, hyper: HyperParams,
                   rounder="attention", quantize_acts=False, abits=None):
    """Quantize every Linear/Conv2d layer in order, each calibrated on the outputs
    of the already-quantized prefix. Returns ``(quantized_model, records)``.

    ``bit_assignment`` maps layer names to weight bits; the first and last
    weighted layers are forced to ``hyper.first_last_bits``.
    """
    if rounder not in Q.ROUNDERS:
        raise ConfigError(f"unknown rounder {rounder!r}; expected one of {Q.ROUNDERS}")
    if quantize_acts and not abits:
        raise ConfigError("activation quantization needs abits")
    if len(calib_images) < hyper.calib_size:
        raise ConfigError(f"need {hyper.calib_size} calibration samples, got {len(calib_images)}")
    bits = effective_bits(model, bit_assignment, hyper.first_last_bits)
    q = model.copy()
    q.act_specs = {}
    taps = {tap: signed for tap, signed in activation_taps(q).values()} if quantize_acts else {}
    h = np.asarray(calib_images[:hyper.calib_size], dtype=F64)
    records = []
    for i, layer in enumerate(q.layers):
        if isinstance(layer, (Linear, Conv2d)):
            W = q.weight(layer.name)
            bias = q.bias(layer.name)
            scale = search_scale(W, bits[layer.name], True)
            spec = QuantSpec(bits[layer.name], scale, True, hyper.weight_tau(scale))
            data = LayerData(W, bias, h, layer)
            rng = make_rng([hyper.seed, i])
            w_hat, rec, extras = quantize_layer_weights(rounder, W, bias, data, spec, hyper, rng, layer.name)
            del data
            q.params[f"{layer.name}.weight"] = np.asarray(w_hat, dtype=F32)
            q.weight_specs[layer.name] = spec
            if "alpha" in extras:
                q.alpha_checksums[layer.name] = weight_checksum(extras["alpha"])
            records.append(rec)
        h = apply_layer(q, layer, h)
        if layer.name in taps:
            q.act_specs[layer.name] = activation_spec(h, abits, taps[layer.name])
            h = Q.quantize_nearest(h, q.act_specs[layer.name], dtype=F64)
    q.bit_assignment = bits
    by_layer = {rec.layer: rec for rec in records}
    if quantize_acts:
        for src, (tap, _) in activation_taps(q).items():
            by_layer[src].bits_a = q.act_specs[tap].bits
    return q, records


def model_weight_bits(model: ModelGraph, bits: dict) -> int:
    """Total weight storage in bits for a per-layer assignment."""
    return int(sum(model.weight(n).size * b for n, b in bits.items()))
