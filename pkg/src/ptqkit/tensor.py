"""Dense float32 arithmetic, special functions and seeded randomness.

Tensors are plain ``numpy.ndarray`` objects in float32, NCHW, row-major.
Products accumulate in float64 and are stored back to float32.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import special

F32 = np.float32
F64 = np.float64

_SQRT2 = math.sqrt(2.0)


class ShapeError(ValueError):
    pass


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=F32)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return (a.astype(F64) @ b.astype(F64)).astype(F32)


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def im2col(x: np.ndarray, k: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Unfold an NCHW batch into patches of shape (N, OH*OW, C*k*k).

    Patch columns are ordered (c, ki, kj), matching ``w.reshape(O, -1)``.
    """
    n, c, h, w = x.shape
    oh, ow = conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"kernel {k} does not fit input {h}x{w} with pad {pad}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :oh, :ow]  # N C OH OW k k
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, oh * ow, c * k * k)


def col2im(cols: np.ndarray, x_shape, k: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patches back into an NCHW array."""
    n, c, h, w = x_shape
    oh, ow = conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)
    cols = cols.reshape(n, oh, ow, c, k, k)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return out


def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0, bias: np.ndarray | None = None) -> np.ndarray:
    """Zero-padded cross-correlation, NCHW input and OIKK kernel."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIKK kernel, got {x.shape} and {w.shape}")
    o, ci, k, k2 = w.shape
    if k != k2:
        raise ShapeError(f"kernel must be square, got {w.shape}")
    if x.shape[1] != ci:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {ci}")
    n, _, h, wd = x.shape
    oh, ow = conv_out_size(h, k, stride, pad), conv_out_size(wd, k, stride, pad)
    cols = im2col(x.astype(F64), k, stride, pad)
    out = cols @ w.reshape(o, -1).astype(F64).T  # N, OH*OW, O
    if bias is not None:
        out += bias.astype(F64)
    return out.transpose(0, 2, 1).reshape(n, o, oh, ow).astype(F32)


def erf(x):
    """Error function; accepts scalars or arrays.

    Exactly odd and saturating to +-1 beyond |x| = 6.
    """
    x = np.asarray(x, dtype=F64)
    y = np.copysign(special.erf(np.abs(x)), x)
    y = np.where(np.abs(x) > 6.0, np.sign(x), y)
    return float(y) if y.ndim == 0 else y


def gaussian_cdf(x, mean: float = 0.0, std: float = 1.0):
    if not std > 0:
        raise ValueError(f"std must be positive, got {std}")
    z = (np.asarray(x, dtype=F64) - mean) / (std * _SQRT2)
    # erfc keeps precision in the far lower tail
    y = 0.5 * special.erfc(-z)
    return float(y) if y.ndim == 0 else y


def make_rng(seed) -> np.random.Generator:
    """PCG64 generator driven only by ``seed`` (an int or a sequence of ints)."""
    return np.random.Generator(np.random.PCG64(seed))


def rng_normal(rng: np.random.Generator, mean: float, std: float, n) -> np.ndarray:
    if std < 0:
        raise ValueError(f"std must be nonnegative, got {std}")
    if std == 0:
        return np.full(n, mean, dtype=F32)
    return (mean + std * rng.standard_normal(n)).astype(F32)
