"""Mixed-precision bit allocation from per-layer lossy coding lengths.

Each layer's weights are viewed as a set of m vectors in R^n (one per output
unit); its coding length at distortion eps is

    L(W) = prefactor * log2 det(I + n / (m eps^2) W W^T)

Layers are sorted by L, grouped by exact 1-D k-means into len(bit_list)
clusters, and clusters get bit widths in the order of their centers.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg

from .errors import ConfigError
from .graph import Conv2d, Linear, ModelGraph


@dataclass(frozen=True)
class CodingConfig:
    epsilon: float = 0.1
    prefactor: str = "full"  # "full": (m + n) / 2, "half": 1 / 2
    center: bool = True

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.prefactor not in ("full", "half"):
            raise ConfigError(f"prefactor must be 'full' or 'half', got {self.prefactor!r}")


def reshape_for_coding(weight, center=True, layer=None) -> np.ndarray:
    """n x m matrix whose columns are the per-output-unit weight vectors.

    Linear (out, in) -> (in, out); Conv2d (O, I, K, K) -> (I*K*K, O).
    """
    if layer is not None and not isinstance(layer, (Linear, Conv2d)):
        raise TypeError(f"layer {getattr(layer, 'name', layer)!r} has no quantizable weights")
    w = np.asarray(weight, dtype=np.float64)
    if w.ndim not in (2, 4):
        raise TypeError(f"expected a Linear or Conv2d weight, got shape {w.shape}")
    mat = w.reshape(w.shape[0], -1).T
    if center:
        mat = mat - mat.mean(axis=1, keepdims=True)
    return mat


def _logdet_spd(a) -> float:
    chol = linalg.cholesky(a, lower=True, check_finite=False)
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


def coding_length(W, cfg: CodingConfig = CodingConfig(), side="auto") -> float:
    """Bits to code the columns of ``W`` (n x m) up to distortion eps^2.

    ``side`` picks the n x n (``"n"``) or m x m (``"m"``) determinant; both are
    equal by Sylvester's identity and ``"auto"`` uses the smaller one.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {W.shape}")
    if not np.isfinite(W).all():
        raise ValueError("coding length needs finite entries")
    n, m = W.shape
    c = n / (m * cfg.epsilon ** 2)
    if side == "auto":
        side = "m" if m < n else "n"
    if side == "n":
        gram = W @ W.T
    elif side == "m":
        gram = W.T @ W
    else:
        raise ValueError(f"side must be 'auto', 'n' or 'm', got {side!r}")
    logdet = _logdet_spd(np.eye(gram.shape[0]) + c * gram)
    pre = (m + n) / 2.0 if cfg.prefactor == "full" else 0.5
    return max(pre * logdet / math.log(2.0), 0.0)


def layer_coding_lengths(model: ModelGraph, cfg: CodingConfig = CodingConfig()) -> dict:
    return {
        layer.name: coding_length(reshape_for_coding(model.weight(layer.name), cfg.center, layer), cfg)
        for layer in model.weighted_layers()
    }


def kmeans_1d(values, k):
    """Globally optimal 1-D k-means by dynamic programming over the sorted values.

    Returns ``(labels, centers)``: labels follow the input order, cluster ids
    increase with the value, centers are ascending.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    n = len(x)
    if k < 1 or k > n:
        raise ConfigError(f"cannot form {k} clusters from {n} values")
    order = np.argsort(x, kind="stable")
    xs = x[order]
    s1 = np.concatenate([[0.0], np.cumsum(xs)])
    s2 = np.concatenate([[0.0], np.cumsum(xs * xs)])

    def sse(i, j):  # cost of xs[i:j]
        cnt = j - i
        tot = s1[j] - s1[i]
        return max(s2[j] - s2[i] - tot * tot / cnt, 0.0)

    # cost[c][j]: best cost of the first j values in c + 1 clusters
    cost = np.full((k, n + 1), np.inf)
    split = np.zeros((k, n + 1), dtype=np.int64)
    for j in range(1, n + 1):
        cost[0, j] = sse(0, j)
    for c in range(1, k):
        for j in range(c + 1, n + 1):
            best, arg = np.inf, c
            for i in range(c, j):
                v = cost[c - 1, i] + sse(i, j)
                if v < best:
                    best, arg = v, i
            cost[c, j], split[c, j] = best, arg
    bounds = [n]
    for c in range(k - 1, 0, -1):
        bounds.append(split[c, bounds[-1]])
    bounds.append(0)
    bounds = bounds[::-1]
    sorted_labels = np.empty(n, dtype=np.int64)
    centers = np.empty(k)
    for c in range(k):
        sorted_labels[bounds[c]:bounds[c + 1]] = c
        centers[c] = xs[bounds[c]:bounds[c + 1]].mean()
    labels = np.empty(n, dtype=np.int64)
    labels[order] = sorted_labels
    return labels, centers


def partition_cost(values, labels) -> float:
    x = np.asarray(values, dtype=np.float64)
    labels = np.asarray(labels)
    return float(sum(((x[labels == c] - x[labels == c].mean()) ** 2).sum() for c in np.unique(labels)))


@dataclass
class BitAssignment:
    bits: dict
    lengths: dict
    bit_list: list
    centers: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def sorted_lengths(self) -> list:
        return sorted(self.lengths.items(), key=lambda kv: kv[1])

    def to_json(self) -> str:
        doc = asdict(self)
        doc["sorted_lengths"] = [[k, v] for k, v in self.sorted_lengths]
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text) -> "BitAssignment":
        doc = json.loads(text)
        doc.pop("sorted_lengths", None)
        return cls(**doc)


def assign_from_lengths(lengths: dict, bit_list) -> tuple:
    """Map layer coding lengths to bits. Returns ``(bits, centers)``."""
    bit_list = [int(b) for b in bit_list]
    if not bit_list:
        raise ConfigError("bit list is empty")
    if any(b2 <= b1 for b1, b2 in zip(bit_list, bit_list[1:])):
        raise ConfigError(f"bit list must be strictly ascending, got {bit_list}")
    names = list(lengths)
    if len(names) < len(bit_list):
        raise ConfigError(f"{len(names)} layers cannot fill {len(bit_list)} bit-width clusters")
    values = np.array([lengths[n] for n in names])
    labels, centers = kmeans_1d(values, len(bit_list))
    cluster_bits = list(bit_list)
    # clusters with identical centers share the largest of their bit widths
    for c in range(len(centers)):
        same = [d for d in range(len(centers)) if centers[d] == centers[c]]
        cluster_bits[c] = max(bit_list[d] for d in same)
    bits = {name: cluster_bits[label] for name, label in zip(names, labels)}
    return bits, [float(c) for c in centers]


def assign_bits(model: ModelGraph, bit_list, cfg: CodingConfig = CodingConfig()) -> BitAssignment:
    lengths = layer_coding_lengths(model, cfg)
    bits, centers = assign_from_lengths(lengths, bit_list)
    return BitAssignment(bits, lengths, [int(b) for b in bit_list], centers, asdict(cfg))
