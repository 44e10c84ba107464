"""Constrained affine parameterization and differentiable bilinear warp.

Conventions, fixed here and relied on by everything downstream:

- Coordinates are center-origin and corner-aligned: pixel (i, j) of an HxW
  plane sits at (x, y) = (2j/(W-1) - 1, 2i/(H-1) - 1), so [-1, 1] spans the
  outermost pixel centers and scaling/rotation act about the image center.
- The affine matrix A maps source coordinates to destination coordinates;
  rendering inverse-maps each destination pixel through A^-1 and bilinearly
  samples the source with zero padding: corners outside the pixel grid
  contribute 0 to the blend.  The output therefore fades linearly to exactly
  0.0 over a one-pixel fringe and is 0.0 beyond it — this keeps the warp
  continuous in A, which the analytic gradients (and any finite-difference
  check of them) require.
- Sample positions are evaluated in the pixel-space coefficient form
  u = B00*j + B01*(cx/cy)*i + const rather than by round-tripping through
  normalized coordinates; the round-trip loses 1-2 ulp and would break the
  exact pass-through of the identity warp.

Raw parameter order everywhere: (t_x, t_y, theta, s_x, s_y, sh_x, sh_y).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AffineSingular, NonFiniteInput, ShapeMismatch, TapeMismatch
from .numerics import sigmoid_scalar

__all__ = [
    "AffineRanges",
    "AffineRaw",
    "AffineConstrained",
    "WarpTape",
    "constrain_affine",
    "build_matrix",
    "matrix_param_grads",
    "make_tape",
    "apply_tape",
    "warp_bilinear",
    "warp_grad_matrix",
    "warp_grad_image",
    "warp_backward",
    "scaling_matrix",
    "DET_EPS",
]

DET_EPS = 1e-6

PARAM_NAMES = ("tx", "ty", "theta", "sx", "sy", "shx", "shy")

# open-interval clamp for sigmoid outputs: keeps s strictly inside (0, 1)
# even where float64 saturates
_SIG_LO = math.nextafter(0.0, 1.0)
_SIG_HI = math.nextafter(1.0, 0.0)


def _sigmoid_open(x: float) -> float:
    return min(max(sigmoid_scalar(x), _SIG_LO), _SIG_HI)


@dataclass(frozen=True)
class AffineRanges:
    """Caps on translation, rotation, and shear after squashing."""

    r_t: float = 0.05
    r_theta: float = 0.1
    r_sh: float = 0.1

    def __post_init__(self):
        if not (self.r_t > 0 and self.r_theta > 0 and self.r_sh > 0):
            raise ValueError("range caps must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.r_t, self.r_theta, self.r_sh], dtype=np.float64)


@dataclass(frozen=True)
class AffineRaw:
    """The 7 unconstrained affine scalars."""

    tx: float = 0.0
    ty: float = 0.0
    theta: float = 0.0
    sx: float = 0.0
    sy: float = 0.0
    shx: float = 0.0
    shy: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.tx, self.ty, self.theta, self.sx, self.sy, self.shx, self.shy],
            dtype=np.float64,
        )

    @classmethod
    def from_array(cls, a) -> "AffineRaw":
        a = np.asarray(a, dtype=np.float64).reshape(7)
        return cls(*(float(v) for v in a))


@dataclass(frozen=True, eq=False)
class AffineConstrained:
    """Squashed (hatted) affine values plus the squashing Jacobian.

    jacobian[k] = d(hatted_k)/d(raw_k), diagonal because the squashings are
    componentwise.
    """

    tx: float
    ty: float
    theta: float
    sx: float
    sy: float
    shx: float
    shy: float
    jacobian: np.ndarray = field(repr=False)

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.tx, self.ty, self.theta, self.sx, self.sy, self.shx, self.shy],
            dtype=np.float64,
        )


def constrain_affine(raw: AffineRaw, ranges: AffineRanges) -> AffineConstrained:
    """Squash raw scalars: t,theta,sh through scaled tanh, s through sigmoid."""
    vals = raw.as_array()
    if not np.all(np.isfinite(vals)):
        raise NonFiniteInput("raw affine parameters contain NaN or Inf")
    th_tx = math.tanh(raw.tx)
    th_ty = math.tanh(raw.ty)
    th_theta = math.tanh(raw.theta)
    th_shx = math.tanh(raw.shx)
    th_shy = math.tanh(raw.shy)
    sg_sx = _sigmoid_open(raw.sx)
    sg_sy = _sigmoid_open(raw.sy)
    jac = np.array(
        [
            ranges.r_t * (1.0 - th_tx * th_tx),
            ranges.r_t * (1.0 - th_ty * th_ty),
            ranges.r_theta * (1.0 - th_theta * th_theta),
            sg_sx * (1.0 - sg_sx),
            sg_sy * (1.0 - sg_sy),
            ranges.r_sh * (1.0 - th_shx * th_shx),
            ranges.r_sh * (1.0 - th_shy * th_shy),
        ],
        dtype=np.float64,
    )
    return AffineConstrained(
        tx=th_tx * ranges.r_t,
        ty=th_ty * ranges.r_t,
        theta=th_theta * ranges.r_theta,
        sx=sg_sx,
        sy=sg_sy,
        shx=th_shx * ranges.r_sh,
        shy=th_shy * ranges.r_sh,
        jacobian=jac,
    )


def build_matrix(c: AffineConstrained) -> np.ndarray:
    """Assemble the 3x3 source->destination matrix from hatted values."""
    ct = math.cos(c.theta)
    st = math.sin(c.theta)
    return np.array(
        [
            [c.sx * ct + c.shx * st, -c.sx * st + c.shx * ct, c.tx],
            [c.sy * st + c.shy * ct, c.sy * ct + c.shy * st, c.ty],
            [0.0, 0.0, 1.0],
        ],
        dtype=np.float64,
    )


def matrix_param_grads(c: AffineConstrained) -> np.ndarray:
    """dA/dc for the 7 constrained params, stacked (7, 3, 3) in PARAM_NAMES
    order."""
    ct = math.cos(c.theta)
    st = math.sin(c.theta)
    g = np.zeros((7, 3, 3), dtype=np.float64)
    g[0, 0, 2] = 1.0
    g[1, 1, 2] = 1.0
    g[2, 0, 0] = -c.sx * st + c.shx * ct
    g[2, 0, 1] = -c.sx * ct - c.shx * st
    g[2, 1, 0] = c.sy * ct - c.shy * st
    g[2, 1, 1] = -c.sy * st + c.shy * ct
    g[3, 0, 0] = ct
    g[3, 0, 1] = -st
    g[4, 1, 0] = st
    g[4, 1, 1] = ct
    g[5, 0, 0] = st
    g[5, 0, 1] = ct
    g[6, 1, 0] = ct
    g[6, 1, 1] = st
    return g


def scaling_matrix(s: float) -> np.ndarray:
    """Pure centered scaling, the matrix shape EVP/AutoVP use."""
    return np.array([[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, 1.0]], dtype=np.float64)


def _invert_affine(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (3, 3):
        raise ShapeMismatch(f"affine matrix must be 3x3, got {a.shape}")
    det2 = a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
    if abs(det2) < DET_EPS:
        raise AffineSingular(f"|det| = {abs(det2):.3e} below {DET_EPS:.0e}")
    b = np.zeros((3, 3), dtype=np.float64)
    b[0, 0] = a[1, 1] / det2
    b[0, 1] = -a[0, 1] / det2
    b[1, 0] = -a[1, 0] / det2
    b[1, 1] = a[0, 0] / det2
    b[0, 2] = -(b[0, 0] * a[0, 2] + b[0, 1] * a[1, 2])
    b[1, 2] = -(b[1, 0] * a[0, 2] + b[1, 1] * a[1, 2])
    b[2, 2] = 1.0
    return b


@dataclass(eq=False)
class WarpTape:
    """Everything backward needs from one warp: the inverse matrix, per-pixel
    sample coordinates, corner indices/validity, bilinear weights, and the
    support flags.  The source array is attached by the forward call that
    records it."""

    a: np.ndarray
    b: np.ndarray
    h: int
    w: int
    xd: np.ndarray  # (W,) destination x coordinates, normalized
    yd: np.ndarray  # (H,) destination y coordinates, normalized
    u: np.ndarray  # (H*W,) sample x in pixel units (along width)
    v: np.ndarray  # (H*W,) sample y in pixel units (along height)
    fu: np.ndarray  # (H*W,) fractional offsets, in [0, 1)
    fv: np.ndarray
    support: np.ndarray  # (H*W,) float64 1 where any real pixel is blended
    idx00: np.ndarray  # (H*W,) flat, index-clipped corner positions
    idx01: np.ndarray
    idx10: np.ndarray
    idx11: np.ndarray
    valid00: np.ndarray  # (H*W,) float64 1 where that corner is a real pixel
    valid01: np.ndarray
    valid10: np.ndarray
    valid11: np.ndarray
    w00: np.ndarray  # (H*W,) bilinear weights, already validity-masked
    w01: np.ndarray
    w10: np.ndarray
    w11: np.ndarray
    source: np.ndarray | None = None

    @property
    def support_mask(self) -> np.ndarray:
        """Support flags as an (H, W) plane: 1 where the warp can produce a
        nonzero value, 0 where it is identically zero."""
        return self.support.reshape(self.h, self.w)


def make_tape(a: np.ndarray, h: int, w: int) -> WarpTape:
    """Precompute sampling geometry for warping any HxW image by A."""
    if h < 2 or w < 2:
        raise ShapeMismatch(f"warp needs at least 2x2 images, got {h}x{w}")
    b = _invert_affine(a)
    cx = (w - 1) / 2.0
    cy = (h - 1) / 2.0
    jj = np.arange(w, dtype=np.float64)
    ii = np.arange(h, dtype=np.float64)
    u = (
        b[0, 0] * jj[None, :]
        + (b[0, 1] * (cx / cy)) * ii[:, None]
        + cx * (b[0, 2] + 1.0 - b[0, 0] - b[0, 1])
    ).ravel()
    v = (
        (b[1, 0] * (cy / cx)) * jj[None, :]
        + b[1, 1] * ii[:, None]
        + cy * (b[1, 2] + 1.0 - b[1, 0] - b[1, 1])
    ).ravel()
    u0 = np.floor(u)
    v0 = np.floor(v)
    fu = u - u0
    fv = v - v0
    vu0 = ((u0 >= 0) & (u0 <= w - 1)).astype(np.float64)
    vu1 = ((u0 >= -1) & (u0 <= w - 2)).astype(np.float64)
    vv0 = ((v0 >= 0) & (v0 <= h - 1)).astype(np.float64)
    vv1 = ((v0 >= -1) & (v0 <= h - 2)).astype(np.float64)
    u0c = np.clip(u0, 0, w - 1).astype(np.int64)
    u1c = np.clip(u0 + 1, 0, w - 1).astype(np.int64)
    v0c = np.clip(v0, 0, h - 1).astype(np.int64)
    v1c = np.clip(v0 + 1, 0, h - 1).astype(np.int64)
    valid00 = vv0 * vu0
    valid01 = vv0 * vu1
    valid10 = vv1 * vu0
    valid11 = vv1 * vu1
    support = ((u > -1.0) & (u < w) & (v > -1.0) & (v < h)).astype(np.float64)
    return WarpTape(
        a=np.asarray(a, dtype=np.float64),
        b=b,
        h=h,
        w=w,
        xd=2.0 * jj / (w - 1) - 1.0,
        yd=2.0 * ii / (h - 1) - 1.0,
        u=u,
        v=v,
        fu=fu,
        fv=fv,
        support=support,
        idx00=v0c * w + u0c,
        idx01=v0c * w + u1c,
        idx10=v1c * w + u0c,
        idx11=v1c * w + u1c,
        valid00=valid00,
        valid01=valid01,
        valid10=valid10,
        valid11=valid11,
        w00=(1.0 - fu) * (1.0 - fv) * valid00,
        w01=fu * (1.0 - fv) * valid01,
        w10=(1.0 - fu) * fv * valid10,
        w11=fu * fv * valid11,
    )


def _check_plane_shape(tape: WarpTape, arr: np.ndarray, what: str) -> None:
    if arr.ndim < 2 or arr.shape[-2] != tape.h or arr.shape[-1] != tape.w:
        raise TapeMismatch(
            f"{what} shape {arr.shape} does not end in ({tape.h}, {tape.w})"
        )


def apply_tape(tape: WarpTape, img: np.ndarray) -> np.ndarray:
    """Warp an (..., H, W) array through a prepared tape.

    Works on single images (C,H,W) and batches (N,C,H,W); the same matrix
    applies to every leading index.
    """
    img = np.asarray(img)
    _check_plane_shape(tape, img, "image")
    flat = np.ascontiguousarray(img).reshape(img.shape[:-2] + (tape.h * tape.w,))
    dt = img.dtype
    w00 = tape.w00.astype(dt, copy=False)
    w01 = tape.w01.astype(dt, copy=False)
    w10 = tape.w10.astype(dt, copy=False)
    w11 = tape.w11.astype(dt, copy=False)
    # np.take compiles to a flat gather and runs ~3x faster than the
    # equivalent fancy indexing; the selected elements are identical
    out = (
        np.take(flat, tape.idx00, axis=-1) * w00
        + np.take(flat, tape.idx01, axis=-1) * w01
        + np.take(flat, tape.idx10, axis=-1) * w10
        + np.take(flat, tape.idx11, axis=-1) * w11
    )
    return out.reshape(img.shape)


def warp_bilinear(img: np.ndarray, a: np.ndarray) -> tuple[np.ndarray, WarpTape]:
    """Warp and record the source on the tape for a later backward call."""
    img = np.asarray(img)
    if img.ndim < 3:
        raise ShapeMismatch(f"expected (..., C, H, W), got {img.shape}")
    tape = make_tape(a, img.shape[-2], img.shape[-1])
    out = apply_tape(tape, img)
    tape.source = img
    return out, tape


def _coord_grads(tape: WarpTape, grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Accumulate d(loss)/du and d(loss)/dv per destination pixel, summed over
    all leading (batch, channel) axes.  Invalid corners are zero-valued in the
    blend, so they enter the derivative as zeros too."""
    src = tape.source
    if src is None:
        raise TapeMismatch("tape has no recorded source; use warp_bilinear")
    grad_out = np.asarray(grad_out)
    if grad_out.shape != src.shape:
        raise TapeMismatch(
            f"grad_out shape {grad_out.shape} != source shape {src.shape}"
        )
    n = tape.h * tape.w
    flat = np.ascontiguousarray(src).reshape(src.shape[:-2] + (n,)).astype(np.float64)
    g = np.ascontiguousarray(grad_out).reshape(src.shape[:-2] + (n,)).astype(np.float64)
    # same flat-gather speedup as apply_tape; selected elements identical
    g00 = np.take(flat, tape.idx00, axis=-1) * tape.valid00
    g01 = np.take(flat, tape.idx01, axis=-1) * tape.valid01
    g10 = np.take(flat, tape.idx10, axis=-1) * tape.valid10
    g11 = np.take(flat, tape.idx11, axis=-1) * tape.valid11
    du = (1.0 - tape.fv) * (g01 - g00) + tape.fv * (g11 - g10)
    dv = (1.0 - tape.fu) * (g10 - g00) + tape.fu * (g11 - g01)
    lead = tuple(range(g.ndim - 1))
    gu = (g * du).sum(axis=lead)
    gv = (g * dv).sum(axis=lead)
    return gu, gv


def warp_grad_matrix(tape: WarpTape, grad_out: np.ndarray) -> np.ndarray:
    """Gradient of the loss w.r.t. the forward matrix A, shape (3,3).

    Chain: sample pixel coords -> normalized source coords -> entries of
    B = A^-1 -> entries of A via dB = -B dA B.
    """
    gu, gv = _coord_grads(tape, grad_out)
    cx = (tape.w - 1) / 2.0
    cy = (tape.h - 1) / 2.0
    gxs = (gu * cx).reshape(tape.h, tape.w)
    gys = (gv * cy).reshape(tape.h, tape.w)
    grad_b = np.zeros((3, 3), dtype=np.float64)
    grad_b[0, 0] = np.einsum("ij,j->", gxs, tape.xd)
    grad_b[0, 1] = np.einsum("ij,i->", gxs, tape.yd)
    grad_b[0, 2] = gxs.sum()
    grad_b[1, 0] = np.einsum("ij,j->", gys, tape.xd)
    grad_b[1, 1] = np.einsum("ij,i->", gys, tape.yd)
    grad_b[1, 2] = gys.sum()
    bt = tape.b.T
    return -bt @ grad_b @ bt


def warp_grad_image(tape: WarpTape, grad_out: np.ndarray) -> np.ndarray:
    """Gradient of the loss w.r.t. the source image: bilinear weights
    scattered back to the real corner pixels of each sample."""
    src = tape.source
    if src is None:
        raise TapeMismatch("tape has no recorded source; use warp_bilinear")
    grad_out = np.asarray(grad_out)
    if grad_out.shape != src.shape:
        raise TapeMismatch(
            f"grad_out shape {grad_out.shape} != source shape {src.shape}"
        )
    n = tape.h * tape.w
    g = np.ascontiguousarray(grad_out).reshape(-1, n).astype(np.float64)
    acc = np.zeros_like(g)
    for idx, wgt in (
        (tape.idx00, tape.w00),
        (tape.idx01, tape.w01),
        (tape.idx10, tape.w10),
        (tape.idx11, tape.w11),
    ):
        contrib = g * wgt
        for row in range(g.shape[0]):
            acc[row] += np.bincount(idx, weights=contrib[row], minlength=n)
    return acc.reshape(grad_out.shape).astype(grad_out.dtype)


def warp_backward(
    tape: WarpTape,
    grad_out: np.ndarray,
    c: AffineConstrained,
    squash_jacobian: np.ndarray | None = None,
    need_input_grad: bool = True,
) -> tuple[np.ndarray | None, np.ndarray]:
    """Backward through the warp: (grad_img, grad over the 7 raw scalars).

    grad_img is skipped (None) when need_input_grad is False; prompt training
    never differentiates w.r.t. the original pixels.
    """
    jac = c.jacobian if squash_jacobian is None else np.asarray(squash_jacobian)
    grad_a = warp_grad_matrix(tape, grad_out)
    dadc = matrix_param_grads(c)
    grad_c = np.einsum("kij,ij->k", dadc, grad_a)
    grad_raw = grad_c * jac
    grad_img = warp_grad_image(tape, grad_out) if need_input_grad else None
    return grad_img, grad_raw
