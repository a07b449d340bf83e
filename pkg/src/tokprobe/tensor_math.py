"""Dense numeric kernel.

Tensors are plain ``numpy.ndarray`` objects stored as C-contiguous float32.
Every reduction accumulates in float64 and casts the result back.
"""
from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import ShapeError, UndefinedDistanceError

DTYPE = np.float32


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    out = a.astype(np.float64) @ b.astype(np.float64)
    return as_tensor(out)


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """``x @ weight.T + bias`` with ``weight`` laid out as (out_features, in_features)."""
    out = x.astype(np.float64) @ weight.astype(np.float64).T
    if bias is not None:
        out += bias
    return as_tensor(out)


def softmax_rows(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 1:
        raise ShapeError("softmax_rows expects at least a 1-d tensor")
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return as_tensor(e / e.sum(axis=-1, keepdims=True))


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    if np.shape(gamma) != (d,) or np.shape(beta) != (d,):
        raise ShapeError(f"layer_norm parameters must have length {d}")
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    denom = np.sqrt(var + eps)
    # zero-variance rows with eps=0 map to 0 rather than NaN
    normed = np.divide(centered, denom, out=np.zeros_like(centered), where=denom > 0)
    return as_tensor(normed * gamma + beta)


def gelu(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return as_tensor(0.5 * x * (1.0 + erf(x / np.sqrt(2.0))))


def l2_norm(v: np.ndarray) -> float:
    v = np.asarray(v, dtype=np.float64).ravel()
    return float(np.sqrt(np.dot(v, v)))


def cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ShapeError(f"vectors differ in length: {u.shape} vs {v.shape}")
    nu = l2_norm(u)
    nv = l2_norm(v)
    if nu == 0.0 or nv == 0.0:
        raise UndefinedDistanceError("cosine distance is undefined for a zero vector")
    cos = float(np.dot(u, v)) / (nu * nv)
    return float(min(2.0, max(0.0, 1.0 - cos)))


def cosine_distance_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine distance between two (n, d) stacks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"row stacks differ: {a.shape} vs {b.shape}")
    na = np.sqrt((a * a).sum(-1))
    nb = np.sqrt((b * b).sum(-1))
    if np.any(na == 0) or np.any(nb == 0):
        raise UndefinedDistanceError("cosine distance is undefined for a zero vector")
    cos = (a * b).sum(-1) / (na * nb)
    return np.clip(1.0 - cos, 0.0, 2.0)
