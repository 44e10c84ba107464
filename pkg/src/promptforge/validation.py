"""Array validation helpers used at public entry points."""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteInput, ShapeMismatch

__all__ = ["check_image", "check_batch", "check_finite", "as_float32"]


def as_float32(x: np.ndarray, name: str = "array") -> np.ndarray:
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        raise ShapeMismatch(f"{name} must be floating point, got {x.dtype}")
    return np.ascontiguousarray(x, dtype=np.float32)


def check_finite(x: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput(f"{name} contains NaN or Inf")
    return x


def check_image(x: np.ndarray, name: str = "image") -> np.ndarray:
    """Validate a single CHW image with 3 channels."""
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ShapeMismatch(f"{name} must have shape (3, H, W), got {x.shape}")
    return x


def check_batch(x: np.ndarray, name: str = "batch") -> np.ndarray:
    """Validate an NCHW batch with 3 channels."""
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeMismatch(f"{name} must have shape (N, 3, H, W), got {x.shape}")
    return x
