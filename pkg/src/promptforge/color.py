"""Multiplicative color prompt, dynamic mask, and masked additive prompt.

These are the second and third stages of the prompting chain: the warped
image is multiplied elementwise by a squashed color field, then a learnable
pattern is added wherever the warp left the canvas empty.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteInput, ShapeMismatch, TapeMismatch
from .numerics import logit_scalar, sigmoid
from .warp import WarpTape

__all__ = [
    "ColorPrompt",
    "AdditivePrompt",
    "constrain_color",
    "generate_mask",
    "apply_color_additive",
    "color_additive_backward",
    "DEFAULT_R_SIGMA",
]

DEFAULT_R_SIGMA = 6.0


@dataclass(eq=False)
class ColorPrompt:
    """Unconstrained per-pixel, per-channel color field with its range cap."""

    sigma_raw: np.ndarray  # (3, H, W)
    r_sigma: float = DEFAULT_R_SIGMA

    def __post_init__(self):
        self.sigma_raw = np.asarray(self.sigma_raw)
        if self.sigma_raw.ndim != 3 or self.sigma_raw.shape[0] != 3:
            raise ShapeMismatch(
                f"sigma_raw must be (3, H, W), got {self.sigma_raw.shape}"
            )
        if not self.r_sigma > 0:
            raise ValueError("r_sigma must be positive")

    @classmethod
    def identity(cls, h: int, w: int, r_sigma: float = DEFAULT_R_SIGMA,
                 dtype=np.float32) -> "ColorPrompt":
        """The no-op color prompt: raw value logit(1/R) so sigma_hat == 1."""
        raw = np.full((3, h, w), logit_scalar(1.0 / r_sigma), dtype=dtype)
        return cls(raw, r_sigma)


@dataclass(eq=False)
class AdditivePrompt:
    """Learnable additive pattern, active only inside the mask."""

    delta: np.ndarray  # (3, H, W)

    def __post_init__(self):
        self.delta = np.asarray(self.delta)
        if self.delta.ndim != 3 or self.delta.shape[0] != 3:
            raise ShapeMismatch(f"delta must be (3, H, W), got {self.delta.shape}")

    @classmethod
    def zeros(cls, h: int, w: int, dtype=np.float32) -> "AdditivePrompt":
        return cls(np.zeros((3, h, w), dtype=dtype))


def constrain_color(p: ColorPrompt) -> tuple[np.ndarray, np.ndarray]:
    """Squash the raw field: sigma_hat = sigmoid(raw) * R, in (0, R).

    Returns (sigma_hat, jacobian) in the storage dtype of sigma_raw; the
    jacobian is d(sigma_hat)/d(raw) elementwise.  Transcendentals run in
    float64 so exact points (raw = logit(1/R) -> sigma_hat = 1) survive the
    float32 round-trip.
    """
    raw = p.sigma_raw
    if not np.all(np.isfinite(raw)):
        raise NonFiniteInput("sigma_raw contains NaN or Inf")
    sig = sigmoid(raw)
    hat64 = sig * p.r_sigma
    jac64 = hat64 * (1.0 - sig)
    dt = raw.dtype
    hat = hat64.astype(dt)
    lo = np.nextafter(dt.type(0), dt.type(1))
    hi = np.nextafter(dt.type(p.r_sigma), dt.type(0))
    np.clip(hat, lo, hi, out=hat)
    return hat, jac64.astype(dt)


def generate_mask(warped: np.ndarray, tape: WarpTape | None, mode: str = "geometric") -> np.ndarray:
    """Binary (H, W) plane marking the empty region the warp created.

    geometric: 1 exactly where the inverse sample has no real-pixel support
    (needs the tape).  zero-test: 1 where all three channels are exactly 0.0,
    which also fires on genuinely black source content.
    """
    warped = np.asarray(warped)
    if warped.ndim < 3:
        raise ShapeMismatch(f"warped must be (..., C, H, W), got {warped.shape}")
    if mode == "geometric":
        if tape is None:
            raise TapeMismatch("geometric mask mode requires the warp tape")
        if (tape.h, tape.w) != warped.shape[-2:]:
            raise TapeMismatch(
                f"tape is {tape.h}x{tape.w}, warped is {warped.shape[-2:]}"
            )
        return (1.0 - tape.support_mask).astype(warped.dtype)
    if mode == "zero-test":
        # one shared mask per call: a batch pixel counts as empty only when
        # every sample and channel lands on exactly 0.0 there
        axes = tuple(range(warped.ndim - 2))
        return np.all(warped == 0.0, axis=axes).astype(warped.dtype)
    raise ValueError(f"unknown mask mode: {mode!r}")


def _check_shapes(warped, sigma_hat, mask, delta):
    if warped.shape[-3:] != sigma_hat.shape:
        raise ShapeMismatch(
            f"sigma_hat {sigma_hat.shape} does not match image {warped.shape}"
        )
    if mask.shape != sigma_hat.shape[-2:]:
        raise ShapeMismatch(f"mask {mask.shape} does not match image {warped.shape}")
    if delta.shape != sigma_hat.shape:
        raise ShapeMismatch(f"delta {delta.shape} does not match sigma {sigma_hat.shape}")


def apply_color_additive(
    warped: np.ndarray,
    sigma_hat: np.ndarray,
    mask: np.ndarray,
    delta: np.ndarray,
) -> np.ndarray:
    """out = warped * sigma_hat + mask * delta, mask broadcast over channels.

    warped may be (3,H,W) or (N,3,H,W); sigma_hat/delta are (3,H,W) and
    broadcast over the batch.
    """
    warped = np.asarray(warped)
    _check_shapes(warped, sigma_hat, mask, delta)
    dt = warped.dtype
    return warped * sigma_hat.astype(dt, copy=False) + (
        mask.astype(dt, copy=False) * delta.astype(dt, copy=False)
    )


def color_additive_backward(
    grad_out: np.ndarray,
    warped: np.ndarray,
    sigma_hat: np.ndarray,
    mask: np.ndarray,
    jacobian: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Backward of apply_color_additive.

    Returns (grad_warped, grad_sigma_raw, grad_delta).  The mask is a
    stop-gradient.  For batched inputs the sigma/delta gradients sum over the
    batch axis (the prompt is shared by every sample).
    """
    grad_out = np.asarray(grad_out)
    warped = np.asarray(warped)
    if grad_out.shape != warped.shape:
        raise ShapeMismatch(
            f"grad_out {grad_out.shape} does not match warped {warped.shape}"
        )
    _check_shapes(warped, sigma_hat, mask, jacobian)
    grad_warped = grad_out * sigma_hat
    grad_sigma = grad_out * warped * jacobian
    grad_delta = grad_out * mask
    if grad_out.ndim == 4:
        grad_sigma = grad_sigma.sum(axis=0)
        grad_delta = grad_delta.sum(axis=0)
    return grad_warped, grad_sigma.astype(sigma_hat.dtype), grad_delta.astype(sigma_hat.dtype)
