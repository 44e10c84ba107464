"""Stochastic augmentation and synthetic corruptions.

One augmentation policy is implemented: draw a single op uniformly from a
fixed 13-op pool, draw a magnitude bin 0..30 uniformly, apply, clamp to
[0, 1].  The pool and the per-op magnitude ramps are pinned constants; they
are a reproducibility contract, not a tunable.

Corruptions are a separate 5-family ladder (severity 1..5) for robustness
evaluation; each family's parameter table is monotone so the expected
distance to the clean image never decreases with severity.

All ops take and return a (C, H, W) float image with values in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeMismatch
from .rng import RngStream
from .warp import warp_bilinear

__all__ = [
    "AUG_POOL",
    "NUM_BINS",
    "SIGNED_OPS",
    "CORRUPTION_KINDS",
    "AugOp",
    "CorruptionSpec",
    "apply_op",
    "trivial_augment",
    "augment_batch",
    "corrupt",
]

AUG_POOL = (
    "identity",
    "rotate",
    "translate-x",
    "translate-y",
    "shear-x",
    "shear-y",
    "brightness",
    "contrast",
    "solarize",
    "posterize",
    "autocontrast",
    "equalize",
    "sharpness-lite",
)

NUM_BINS = 31

# ops whose magnitude gets a uniformly random sign
SIGNED_OPS = frozenset(
    {
        "rotate",
        "translate-x",
        "translate-y",
        "shear-x",
        "shear-y",
        "brightness",
        "contrast",
        "sharpness-lite",
    }
)

# magnitude ramps at full strength (bin 30); linear in bin below that
ROTATE_MAX_DEG = 30.0
TRANSLATE_MAX_FRAC = 0.25
SHEAR_MAX = 0.3
ENHANCE_MAX = 0.9  # brightness/contrast/sharpness factor = 1 +- this

CORRUPTION_KINDS = (
    "gaussian-noise",
    "brightness",
    "contrast",
    "box-blur",
    "pixelate",
)

# severity tables, index = severity - 1
GAUSS_SIGMA = (0.04, 0.08, 0.12, 0.18, 0.26)
BRIGHT_SHIFT = (0.06, 0.12, 0.18, 0.24, 0.30)
CONTRAST_KEEP = (0.75, 0.60, 0.45, 0.30, 0.15)
# blur severity blends toward a fixed 5x5 box; the blend weight makes the
# distance to the clean image exactly linear in severity strength, so the
# ladder is monotone on every image (iterated box passes are not: the box
# kernel has negative eigenvalues whose powers alternate)
BLUR_ALPHA = (0.2, 0.4, 0.6, 0.8, 1.0)
BLUR_SIZE = 5
PIXELATE_BLOCK = (2, 3, 4, 6, 8)


@dataclass(frozen=True)
class AugOp:
    kind: str
    mag_bin: int

    def __post_init__(self):
        if self.kind not in AUG_POOL:
            raise ConfigError(f"unknown augmentation op {self.kind!r}")
        if not 0 <= self.mag_bin < NUM_BINS:
            raise ConfigError(f"magnitude bin {self.mag_bin} outside 0..{NUM_BINS - 1}")


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ConfigError(f"unknown corruption kind {self.kind!r}")
        if not 1 <= self.severity <= 5:
            raise ConfigError(f"severity {self.severity} outside 1..5")


def _check_img(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3:
        raise ShapeMismatch(f"expected (C, H, W), got {img.shape}")
    return img


def _warp_by(img: np.ndarray, a: np.ndarray) -> np.ndarray:
    out, _ = warp_bilinear(img, a)
    return out


def _box_blur(img: np.ndarray, k: int = 3) -> np.ndarray:
    """k x k box mean with replicated edges."""
    r = k // 2
    p = np.pad(img, ((0, 0), (r, r), (r, r)), mode="edge")
    acc = np.zeros_like(img, dtype=np.float64)
    for di in range(k):
        for dj in range(k):
            acc += p[:, di : di + img.shape[1], dj : dj + img.shape[2]]
    return (acc / (k * k)).astype(img.dtype, copy=False)


def _to_bytes(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.int64)


def _equalize_channel(q: np.ndarray) -> np.ndarray | None:
    """Histogram-equalize one quantized channel, classic integer LUT.

    Returns None when the histogram is too concentrated to define a step,
    meaning the channel should pass through untouched."""
    hist = np.bincount(q.reshape(-1), minlength=256)
    step = (int(hist.sum()) - int(hist[255])) // 255
    if step == 0:
        return None
    shifted = np.concatenate(([0], np.cumsum(hist)[:-1])) + step // 2
    lut = np.clip(shifted // step, 0, 255)
    return lut[q]


def _pixelate(img: np.ndarray, block: int) -> np.ndarray:
    c, h, w = img.shape
    ri = np.arange(0, h, block)
    ci = np.arange(0, w, block)
    sums = np.add.reduceat(np.add.reduceat(img, ri, axis=1), ci, axis=2)
    rows = np.minimum(ri + block, h) - ri
    cols = np.minimum(ci + block, w) - ci
    means = sums / (rows[:, None] * cols[None, :])
    out = np.repeat(np.repeat(means, rows, axis=1), cols, axis=2)
    return out.astype(img.dtype, copy=False)


def apply_op(img: np.ndarray, op: AugOp, sign: int = 1) -> np.ndarray:
    """Apply one pool op at the given magnitude bin; sign flips signed ops."""
    img = _check_img(img)
    t = op.mag_bin / (NUM_BINS - 1)
    s = float(sign) if op.kind in SIGNED_OPS else 1.0
    k = op.kind
    if k == "identity" or (t == 0.0 and k not in ("autocontrast", "equalize", "posterize")):
        out = img
    elif k == "rotate":
        th = np.deg2rad(s * ROTATE_MAX_DEG * t)
        ct, st = np.cos(th), np.sin(th)
        out = _warp_by(img, np.array([[ct, -st, 0.0], [st, ct, 0.0], [0, 0, 1.0]]))
    elif k == "translate-x":
        out = _warp_by(
            img, np.array([[1.0, 0, 2 * s * TRANSLATE_MAX_FRAC * t], [0, 1.0, 0], [0, 0, 1.0]])
        )
    elif k == "translate-y":
        out = _warp_by(
            img, np.array([[1.0, 0, 0], [0, 1.0, 2 * s * TRANSLATE_MAX_FRAC * t], [0, 0, 1.0]])
        )
    elif k == "shear-x":
        out = _warp_by(img, np.array([[1.0, s * SHEAR_MAX * t, 0], [0, 1.0, 0], [0, 0, 1.0]]))
    elif k == "shear-y":
        out = _warp_by(img, np.array([[1.0, 0, 0], [s * SHEAR_MAX * t, 1.0, 0], [0, 0, 1.0]]))
    elif k == "brightness":
        out = img * (1.0 + s * ENHANCE_MAX * t)
    elif k == "contrast":
        mean = img.mean()
        out = mean + (img - mean) * (1.0 + s * ENHANCE_MAX * t)
    elif k == "solarize":
        thr = 1.0 - t
        out = np.where(img > thr, 1.0 - img, img)
    elif k == "posterize":
        bits = 8 - int(np.rint(4 * t))
        mask = ~((1 << (8 - bits)) - 1)
        out = (_to_bytes(img) & mask) / 255.0
    elif k == "autocontrast":
        lo = img.min(axis=(1, 2), keepdims=True)
        hi = img.max(axis=(1, 2), keepdims=True)
        span = hi - lo
        flat = span <= 0
        out = np.where(flat, img, (img - lo) / np.where(flat, 1.0, span))
    elif k == "equalize":
        q = _to_bytes(img)
        chans = []
        for c in range(img.shape[0]):
            eq = _equalize_channel(q[c])
            chans.append(img[c] if eq is None else eq / 255.0)
        out = np.stack(chans)
    elif k == "sharpness-lite":
        out = img + s * ENHANCE_MAX * t * (img - _box_blur(img))
    else:  # pragma: no cover - pool membership checked in AugOp
        raise ConfigError(f"unhandled op {k!r}")
    return np.clip(out, 0.0, 1.0).astype(img.dtype, copy=False)


def trivial_augment(img: np.ndarray, rng: RngStream) -> np.ndarray:
    """One uniformly random op at a uniformly random magnitude.

    Draw order is fixed: op index, then magnitude bin, then sign.  The same
    stream always produces the same transformed image.
    """
    gen = rng.generator()
    kind = AUG_POOL[int(gen.integers(0, len(AUG_POOL)))]
    mag_bin = int(gen.integers(0, NUM_BINS))
    sign = 1 if int(gen.integers(0, 2)) == 0 else -1
    return apply_op(img, AugOp(kind, mag_bin), sign)


def augment_batch(batch: np.ndarray, rng: RngStream) -> np.ndarray:
    """Augment each sample with its own derived stream, keyed by position."""
    batch = np.asarray(batch)
    if batch.ndim != 4:
        raise ShapeMismatch(f"expected (N, C, H, W), got {batch.shape}")
    return np.stack([trivial_augment(batch[i], rng.indexed(i)) for i in range(batch.shape[0])])


def corrupt(img: np.ndarray, spec: CorruptionSpec, rng: RngStream) -> np.ndarray:
    """Apply one corruption family at the given severity.

    Only gaussian-noise consumes randomness; with the same stream, the noise
    field is identical across severities, so the distance ladder is pointwise
    monotone, not merely on average.
    """
    img = _check_img(img)
    i = spec.severity - 1
    k = spec.kind
    if k == "gaussian-noise":
        noise = rng.generator().standard_normal(img.shape)
        out = img + GAUSS_SIGMA[i] * noise
    elif k == "brightness":
        out = img + BRIGHT_SHIFT[i]
    elif k == "contrast":
        mean = img.mean()
        out = mean + (img - mean) * CONTRAST_KEEP[i]
    elif k == "box-blur":
        blurred = _box_blur(img, BLUR_SIZE)
        out = img + BLUR_ALPHA[i] * (blurred - img)
    elif k == "pixelate":
        out = _pixelate(img, PIXELATE_BLOCK[i])
    else:  # pragma: no cover - kind checked in CorruptionSpec
        raise ConfigError(f"unhandled corruption {k!r}")
    return np.clip(out, 0.0, 1.0).astype(img.dtype, copy=False)
