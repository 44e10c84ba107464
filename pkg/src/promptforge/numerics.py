"""Numerically stable scalar/array helpers.

Squashing functions are evaluated in float64 regardless of storage dtype and
cast back afterwards; this keeps analytically exact points (sigmoid(logit(p))
== p) exact after the float32 round-trip.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = ["sigmoid", "logit", "sigmoid_scalar", "logit_scalar", "softmax"]


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Elementwise logistic function, overflow-safe, computed in float64."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def logit(p: np.ndarray) -> np.ndarray:
    """Inverse of sigmoid for p in (0,1), computed in float64."""
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def sigmoid_scalar(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def logit_scalar(p: float) -> float:
    return math.log(p) - math.log1p(-p)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Stable softmax in float64, cast back to the input dtype."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return out.astype(np.asarray(logits).dtype)
