"""Sequential layer graphs: forward/backward, batch-norm folding and a small SGD trainer."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .quantizers import quantize_nearest
from .tensor import F32, F64, ShapeError, col2im, conv_out_size, im2col


class StructureError(ValueError):
    pass


class CapabilityError(TypeError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, msg, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass
class Linear:
    name: str
    in_features: int
    out_features: int
    bias: bool = True


@dataclass
class Conv2d:
    name: str
    in_ch: int
    out_ch: int
    k: int
    stride: int = 1
    pad: int = 0
    bias: bool = True


@dataclass
class BatchNorm:
    name: str
    ch: int
    eps: float = 1e-5
    momentum: float = 0.1


@dataclass
class ReLU:
    name: str


@dataclass
class AvgPool:
    name: str
    k: int


@dataclass
class Flatten:
    name: str


LAYER_KINDS = {cls.__name__: cls for cls in (Linear, Conv2d, BatchNorm, ReLU, AvgPool, Flatten)}
WEIGHTED = (Linear, Conv2d)


@dataclass
class ModelGraph:
    """An ordered chain of layers plus a flat parameter dict keyed ``"<layer>.<param>"``.

    ``act_specs`` maps a layer name to the activation quantizer applied to that
    layer's output; ``weight_specs`` and ``bit_assignment`` record how the
    weights were quantized (metadata only).
    """

    layers: list
    params: dict = field(default_factory=dict)
    input_shape: tuple | None = None
    act_specs: dict = field(default_factory=dict)
    weight_specs: dict = field(default_factory=dict)
    bit_assignment: dict | None = None
    alpha_checksums: dict = field(default_factory=dict)

    def __post_init__(self):
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise StructureError(f"duplicate layer names in {names}")

    def copy(self) -> "ModelGraph":
        return copy.deepcopy(self)

    def layer(self, name):
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(f"no layer named {name!r}")

    def index(self, name) -> int:
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise KeyError(f"no layer named {name!r}")

    def weighted_layers(self) -> list:
        return [layer for layer in self.layers if isinstance(layer, WEIGHTED)]

    def weight(self, name) -> np.ndarray:
        return self.params[f"{name}.weight"]

    def bias(self, name):
        return self.params.get(f"{name}.bias")


def init_params(layers, rng) -> dict:
    """He-normal weights, zero biases, identity batch-norm."""
    params = {}
    for layer in layers:
        if isinstance(layer, Linear):
            std = math.sqrt(2.0 / layer.in_features)
            params[f"{layer.name}.weight"] = (std * rng.standard_normal((layer.out_features, layer.in_features))).astype(F32)
            if layer.bias:
                params[f"{layer.name}.bias"] = np.zeros(layer.out_features, F32)
        elif isinstance(layer, Conv2d):
            std = math.sqrt(2.0 / (layer.in_ch * layer.k * layer.k))
            params[f"{layer.name}.weight"] = (std * rng.standard_normal((layer.out_ch, layer.in_ch, layer.k, layer.k))).astype(F32)
            if layer.bias:
                params[f"{layer.name}.bias"] = np.zeros(layer.out_ch, F32)
        elif isinstance(layer, BatchNorm):
            params[f"{layer.name}.gamma"] = np.ones(layer.ch, F32)
            params[f"{layer.name}.beta"] = np.zeros(layer.ch, F32)
            params[f"{layer.name}.running_mean"] = np.zeros(layer.ch, F32)
            params[f"{layer.name}.running_var"] = np.ones(layer.ch, F32)
    return params


def toy_cnn(rng, in_ch=1, classes=10, image=28, width=(8, 16), hidden=64) -> ModelGraph:
    """conv-bn-relu-pool x2, then two linear layers."""
    c1, c2 = width
    side = image // 4
    layers = [
        Conv2d("conv1", in_ch, c1, 3, 1, 1, bias=False), BatchNorm("bn1", c1), ReLU("relu1"), AvgPool("pool1", 2),
        Conv2d("conv2", c1, c2, 3, 1, 1, bias=False), BatchNorm("bn2", c2), ReLU("relu2"), AvgPool("pool2", 2),
        Flatten("flatten"),
        Linear("fc1", c2 * side * side, hidden), ReLU("relu3"),
        Linear("fc2", hidden, classes),
    ]
    return ModelGraph(layers, init_params(layers, rng), input_shape=(in_ch, image, image))


# -- forward / backward --------------------------------------------------------

def _bn_stats(x):
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    return x.mean(axis=axes), x.var(axis=axes)


def _bn_view(v, ndim):
    return v.reshape(1, -1, 1, 1) if ndim == 4 else v.reshape(1, -1)


def _layer_forward(layer, h, p, train=False, keep=False):
    """One layer in float64. Returns (output, cache entry)."""
    entry = {"in_shape": h.shape}
    if isinstance(layer, Linear):
        if h.ndim != 2 or h.shape[1] != layer.in_features:
            raise ShapeError(f"{layer.name}: expected (N, {layer.in_features}) input, got {h.shape}")
        if keep:
            entry["x"] = h
        out = h @ p[f"{layer.name}.weight"].astype(F64).T
        if layer.bias:
            out = out + p[f"{layer.name}.bias"]
    elif isinstance(layer, Conv2d):
        if h.ndim != 4 or h.shape[1] != layer.in_ch:
            raise ShapeError(f"{layer.name}: expected (N, {layer.in_ch}, H, W) input, got {h.shape}")
        n, _, hh, ww = h.shape
        oh, ow = conv_out_size(hh, layer.k, layer.stride, layer.pad), conv_out_size(ww, layer.k, layer.stride, layer.pad)
        cols = im2col(h, layer.k, layer.stride, layer.pad)
        if keep:
            entry["cols"] = cols
        out = cols @ p[f"{layer.name}.weight"].reshape(layer.out_ch, -1).astype(F64).T
        if layer.bias:
            out = out + p[f"{layer.name}.bias"]
        out = out.transpose(0, 2, 1).reshape(n, layer.out_ch, oh, ow)
    elif isinstance(layer, BatchNorm):
        if h.shape[1] != layer.ch:
            raise ShapeError(f"{layer.name}: expected {layer.ch} channels, got {h.shape}")
        if train:
            mean, var = _bn_stats(h)
            entry["batch_mean"], entry["batch_var"] = mean, var
        else:
            mean = p[f"{layer.name}.running_mean"].astype(F64)
            var = p[f"{layer.name}.running_var"].astype(F64)
        inv = 1.0 / np.sqrt(var + layer.eps)
        xhat = (h - _bn_view(mean, h.ndim)) * _bn_view(inv, h.ndim)
        if keep:
            entry["xhat"], entry["inv"] = xhat, inv
        out = xhat * _bn_view(p[f"{layer.name}.gamma"], h.ndim) + _bn_view(p[f"{layer.name}.beta"], h.ndim)
    elif isinstance(layer, ReLU):
        out = np.maximum(h, 0.0)
        if keep:
            entry["mask"] = h > 0
    elif isinstance(layer, AvgPool):
        n, c, hh, ww = h.shape
        k = layer.k
        out = h[:, :, :hh // k * k, :ww // k * k].reshape(n, c, hh // k, k, ww // k, k).mean(axis=(3, 5))
    elif isinstance(layer, Flatten):
        out = h.reshape(h.shape[0], -1)
    else:
        raise CapabilityError(f"unsupported layer kind {type(layer).__name__}")
    return out, entry


def apply_layer(model: ModelGraph, layer, x, quantize_act=True) -> np.ndarray:
    """Evaluate a single layer of ``model`` (float64 in, float64 out)."""
    out, _ = _layer_forward(layer, np.asarray(x, dtype=F64), model.params)
    spec = model.act_specs.get(layer.name)
    if quantize_act and spec is not None:
        out = quantize_nearest(out, spec, dtype=F64)
    return out


def _run(model, x, train=False, stop=None, keep=False):
    """Evaluate the chain in float64. Returns (output, cache list)."""
    cache = []
    h = np.asarray(x, dtype=F64)
    for layer in model.layers:
        h, entry = _layer_forward(layer, h, model.params, train, keep)
        spec = model.act_specs.get(layer.name)
        if spec is not None:
            h = quantize_nearest(h, spec, dtype=F64)
        cache.append(entry)
        if stop is not None and layer.name == stop:
            break
    return h, cache


def forward(model: ModelGraph, x, tap=None, train=False) -> np.ndarray:
    """Run the model; with ``tap`` return the activation right after that layer."""
    if tap is not None:
        model.index(tap)
    out, _ = _run(model, x, train=train, stop=tap)
    return out.astype(F32)


def backward(model: ModelGraph, x, grad_out, train=False) -> dict:
    """Reverse-mode gradients of ``sum(grad_out * forward(x))``.

    Keys match ``model.params`` for trainable tensors plus ``"input"``.
    Activation quantizers are passed straight through.
    """
    out, cache = _run(model, x, train=train, keep=True)
    g = np.asarray(grad_out, dtype=F64)
    if g.shape != out.shape:
        raise ShapeError(f"grad_out shape {g.shape} != output shape {out.shape}")
    return _backward(model, cache, g, train)


def _backward(model, cache, g, train):
    p = model.params
    grads = {}
    for layer, entry in zip(reversed(model.layers), reversed(cache)):
        if isinstance(layer, Linear):
            xin = entry["x"]
            grads[f"{layer.name}.weight"] = (g.T @ xin).astype(F32)
            if layer.bias:
                grads[f"{layer.name}.bias"] = g.sum(axis=0).astype(F32)
            g = g @ p[f"{layer.name}.weight"].astype(F64)
        elif isinstance(layer, Conv2d):
            cols = entry["cols"]
            n, o = g.shape[0], layer.out_ch
            gm = g.reshape(n, o, -1).transpose(0, 2, 1)  # N, P, O
            wmat = p[f"{layer.name}.weight"].reshape(o, -1).astype(F64)
            gw = gm.reshape(-1, o).T @ cols.reshape(-1, cols.shape[-1])
            grads[f"{layer.name}.weight"] = gw.reshape(p[f"{layer.name}.weight"].shape).astype(F32)
            if layer.bias:
                grads[f"{layer.name}.bias"] = gm.sum(axis=(0, 1)).astype(F32)
            g = col2im(gm @ wmat, entry["in_shape"], layer.k, layer.stride, layer.pad)
        elif isinstance(layer, BatchNorm):
            nd = g.ndim
            axes = (0, 2, 3) if nd == 4 else (0,)
            xhat, inv = entry["xhat"], entry["inv"]
            gamma = p[f"{layer.name}.gamma"].astype(F64)
            grads[f"{layer.name}.gamma"] = (g * xhat).sum(axis=axes).astype(F32)
            grads[f"{layer.name}.beta"] = g.sum(axis=axes).astype(F32)
            gx = g * _bn_view(gamma, nd)
            if train:
                m = g.size / g.shape[1]
                g = _bn_view(inv, nd) * (gx - gx.sum(axis=axes).reshape(_bn_view(inv, nd).shape) / m
                                         - xhat * (gx * xhat).sum(axis=axes).reshape(_bn_view(inv, nd).shape) / m)
            else:
                g = gx * _bn_view(inv, nd)
        elif isinstance(layer, ReLU):
            g = g * entry["mask"]
        elif isinstance(layer, AvgPool):
            n, c, hh, ww = entry["in_shape"]
            k = layer.k
            up = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
            full = np.zeros(entry["in_shape"], F64)
            full[:, :, :up.shape[2], :up.shape[3]] = up
            g = full
        elif isinstance(layer, Flatten):
            g = g.reshape(entry["in_shape"])
        else:
            raise CapabilityError(f"unsupported layer kind {type(layer).__name__}")
    grads["input"] = g.astype(F32)
    return grads


# -- batch-norm folding ------------------------------------------------------------

def fuse_bn(model: ModelGraph) -> ModelGraph:
    """Fold every BatchNorm into the Linear/Conv2d right before it.

    A bias is created on the affine layer when it had none.
    """
    layers, params = [], dict(model.params)
    for layer in model.layers:
        if not isinstance(layer, BatchNorm):
            layers.append(copy.copy(layer))
            continue
        prev = layers[-1] if layers else None
        if not isinstance(prev, WEIGHTED):
            raise StructureError(f"batch norm {layer.name!r} does not follow a Linear/Conv2d layer")
        out_ch = prev.out_features if isinstance(prev, Linear) else prev.out_ch
        if out_ch != layer.ch:
            raise StructureError(f"batch norm {layer.name!r} has {layer.ch} channels, {prev.name!r} produces {out_ch}")
        gamma = params.pop(f"{layer.name}.gamma").astype(F64)
        beta = params.pop(f"{layer.name}.beta").astype(F64)
        mu = params.pop(f"{layer.name}.running_mean").astype(F64)
        var = params.pop(f"{layer.name}.running_var").astype(F64)
        factor = gamma / np.sqrt(var + layer.eps)
        w = params[f"{prev.name}.weight"].astype(F64)
        b = params[f"{prev.name}.bias"].astype(F64) if prev.bias else np.zeros(out_ch)
        params[f"{prev.name}.weight"] = (w * factor.reshape((-1,) + (1,) * (w.ndim - 1))).astype(F32)
        params[f"{prev.name}.bias"] = (beta + factor * (b - mu)).astype(F32)
        prev.bias = True
    fused = ModelGraph(layers, params, input_shape=model.input_shape)
    fused.act_specs = dict(model.act_specs)
    return fused


# -- training ------------------------------------------------------------------------

def softmax_xent(logits, labels):
    """Mean cross-entropy and its gradient with respect to the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def predict(model, images, batch=500) -> np.ndarray:
    preds = [forward(model, images[i:i + batch]).argmax(axis=1) for i in range(0, len(images), batch)]
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy(model, ds, batch=500) -> float:
    if len(ds.labels) == 0:
        raise ValueError("cannot evaluate accuracy on an empty dataset")
    return float((predict(model, ds.images, batch) == ds.labels).mean())


def train_baseline(model, dataset, epochs, lr, rng, test=None, batch=64, momentum=0.9, weight_decay=0.0):
    """Minibatch SGD with momentum on cross-entropy.

    Returns ``(trained_model, accuracy)`` where accuracy is measured on ``test``
    (or on ``dataset`` when no test set is given). Batch-norm layers use batch
    statistics during training and update their running estimates.
    """
    model = model.copy()
    keys = [k for k in model.params if not k.endswith(("running_mean", "running_var"))]
    velocity = {k: np.zeros_like(model.params[k], dtype=F64) for k in keys}
    bns = [(i, layer) for i, layer in enumerate(model.layers) if isinstance(layer, BatchNorm)]
    n = len(dataset.labels)
    stable = model.copy()
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            xb, yb = dataset.images[idx], dataset.labels[idx]
            logits, cache = _run(model, xb, train=True, keep=lr != 0)
            loss, dlogits = softmax_xent(logits, yb)
            if not math.isfinite(loss):
                raise TrainingError(f"loss became {loss} in epoch {epoch}", checkpoint=stable)
            if lr == 0:
                continue
            grads = _backward(model, cache, dlogits, train=True)
            for k in keys:
                g = grads[k].astype(F64)
                if weight_decay and k.endswith(".weight"):
                    g = g + weight_decay * model.params[k]
                velocity[k] = momentum * velocity[k] + g
                model.params[k] = (model.params[k] - lr * velocity[k]).astype(F32)
            for i, layer in bns:
                mom = layer.momentum
                m = cache[i]["batch_mean"]
                count = cache[i]["in_shape"][0] * int(np.prod(cache[i]["in_shape"][2:]))
                v = cache[i]["batch_var"] * count / max(count - 1, 1)
                rm, rv = f"{layer.name}.running_mean", f"{layer.name}.running_var"
                model.params[rm] = ((1 - mom) * model.params[rm] + mom * m).astype(F32)
                model.params[rv] = ((1 - mom) * model.params[rv] + mom * v).astype(F32)
        if all(np.isfinite(v).all() for v in model.params.values()):
            stable = model.copy()
        else:
            raise TrainingError(f"parameters diverged in epoch {epoch}", checkpoint=stable)
    return model, accuracy(model, test if test is not None else dataset)
