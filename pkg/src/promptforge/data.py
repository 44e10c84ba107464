"""Dataset construction: a seeded synthetic shapes generator, an IDX file
loader, deterministic stratified splitting, and the global domain-shift
transform that defines the desk-scale adaptation task.

Images are always (N, 3, H, W) float32 in [0, 1].  Split membership is a
per-sample tag; a freshly built dataset is all-train until split() assigns
tags.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadClassCount,
    BadMagic,
    ClassMismatch,
    ConfigError,
    CountMismatch,
    DegenerateSplit,
    DimensionMismatch,
    NonFiniteInput,
    ShapeMismatch,
)
from .rng import RngStream

__all__ = [
    "SPLITS",
    "SHAPE_FAMILIES",
    "Dataset",
    "ShiftConfig",
    "default_shift",
    "gen_shapes",
    "shift_domain",
    "load_idx",
    "split",
]

SPLITS = ("train", "val", "test")

SHAPE_FAMILIES = (
    "circle",
    "square",
    "triangle",
    "cross",
    "ring",
    "diamond",
    "saltire",
    "frame",
)


@dataclass
class Dataset:
    """An in-memory labeled image collection with split tags.

    Treated as immutable once constructed; transforms return new instances.
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    tags: np.ndarray = None
    provenance: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ShapeMismatch(
                f"images must be (N, 3, H, W), got {self.images.shape}"
            )
        if self.labels.shape != (self.images.shape[0],):
            raise CountMismatch(
                f"{self.images.shape[0]} images but {self.labels.shape} labels"
            )
        if not np.all(np.isfinite(self.images)):
            raise NonFiniteInput("images contain non-finite values")
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise ClassMismatch(
                f"labels span [{self.labels.min()}, {self.labels.max()}] "
                f"for num_classes={self.num_classes}"
            )
        if self.tags is None:
            self.tags = np.zeros(self.images.shape[0], dtype=np.int8)
        else:
            self.tags = np.asarray(self.tags, dtype=np.int8)
            if self.tags.shape != self.labels.shape:
                raise CountMismatch(
                    f"{self.tags.shape} tags for {self.labels.shape} labels"
                )
            if self.tags.size and (
                self.tags.min() < 0 or self.tags.max() >= len(SPLITS)
            ):
                raise ConfigError("tags must index into (train, val, test)")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def height(self) -> int:
        return self.images.shape[2]

    @property
    def width(self) -> int:
        return self.images.shape[3]

    def subset(self, tag: str) -> tuple[np.ndarray, np.ndarray]:
        if tag not in SPLITS:
            raise ConfigError(f"unknown split tag {tag!r}")
        keep = self.tags == SPLITS.index(tag)
        return self.images[keep], self.labels[keep]

    def count(self, tag: str) -> int:
        return int((self.tags == SPLITS.index(tag)).sum())

    @property
    def train_x(self):
        return self.subset("train")[0]

    @property
    def train_y(self):
        return self.subset("train")[1]

    @property
    def val_x(self):
        return self.subset("val")[0]

    @property
    def val_y(self):
        return self.subset("val")[1]

    @property
    def test_x(self):
        return self.subset("test")[0]

    @property
    def test_y(self):
        return self.subset("test")[1]


def _shape_mask(family: str, h, w, cy, cx, r) -> np.ndarray:
    """Hard-edged boolean membership; no anti-aliasing anywhere."""
    yy, xx = np.mgrid[0:h, 0:w]
    dy = yy - cy
    dx = xx - cx
    if family == "circle":
        return dy * dy + dx * dx <= r * r
    if family == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= r
    if family == "triangle":
        return (np.abs(dy) <= r) & (np.abs(dx) <= (dy + r) / 2)
    if family == "cross":
        arm = max(r // 3, 1)
        tall = (np.abs(dx) <= arm) & (np.abs(dy) <= r)
        wide = (np.abs(dy) <= arm) & (np.abs(dx) <= r)
        return tall | wide
    if family == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (r * r) / 4)
    if family == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if family == "saltire":
        arm = max(int(r * 0.45), 1)
        box = (np.abs(dy) <= r) & (np.abs(dx) <= r)
        return box & (
            (np.abs(dy - dx) <= arm) | (np.abs(dy + dx) <= arm)
        )
    if family == "frame":
        outer = np.maximum(np.abs(dy), np.abs(dx))
        return (outer <= r) & (outer >= r / 2)
    raise ConfigError(f"unknown shape family {family!r}")


def gen_shapes(n: int, h: int, w: int, num_classes: int, rng: RngStream) -> Dataset:
    """Rasterize n single-shape images over solid random backgrounds.

    Labels cycle through the classes before shuffling, so per-class counts
    are exactly balanced whenever num_classes divides n.  Per-image draws
    come from an indexed child stream in a pinned order: radius, center row,
    center column, shape color, background color.
    """
    if not 2 <= num_classes <= len(SHAPE_FAMILIES):
        raise BadClassCount(
            f"num_classes must lie in [2, {len(SHAPE_FAMILIES)}], got {num_classes}"
        )
    if n < 1 or h < 8 or w < 8:
        raise ShapeMismatch(f"need n >= 1 and at least 8x8, got n={n}, {h}x{w}")
    labels = np.arange(n, dtype=np.int64) % num_classes
    labels = labels[rng.child("labels").generator().permutation(n)]
    images = np.empty((n, 3, h, w), dtype=np.float32)
    # radius must leave room for a center strictly inside the canvas
    r_hi = min(max(min(h, w) // 3, 4), (min(h, w) - 2) // 2)
    r_lo = min(max(min(h, w) // 6, 3), r_hi)
    draw = rng.child("draw")
    for i in range(n):
        gen = draw.indexed(i).generator()
        r = int(gen.integers(r_lo, r_hi + 1))
        cy = int(gen.integers(r, h - r))
        cx = int(gen.integers(r, w - r))
        color = 0.45 + 0.55 * gen.random(3)
        bg = 0.35 * gen.random(3)
        mask = _shape_mask(SHAPE_FAMILIES[labels[i]], h, w, cy, cx, r)
        img = np.broadcast_to(bg.reshape(3, 1, 1), (3, h, w)).copy()
        img[:, mask] = color[:, None]
        images[i] = img
    return Dataset(
        images=images,
        labels=labels,
        num_classes=num_classes,
        provenance=f"shapes(n={n},hw={h}x{w},classes={num_classes},"
        f"seed={rng.seed})",
    )


@dataclass(frozen=True)
class ShiftConfig:
    """A global target-domain transform: hue rotation about the gray axis
    (radians), integer pixel translation (wrapping), and an additive
    background level change.  seed reserves a stream for seeded variants."""

    hue: float = 0.0
    tx: int = 0
    ty: int = 0
    background: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.hue) and np.isfinite(self.background)):
            raise NonFiniteInput("shift parameters must be finite")


def default_shift() -> ShiftConfig:
    """The desk-scale adaptation target: rotated hues, a diagonal nudge,
    darkened background."""
    return ShiftConfig(hue=1.5, tx=6, ty=4, background=-0.25)


def _hue_matrix(theta: float) -> np.ndarray:
    # Rodrigues rotation about the normalized (1,1,1) axis
    k = np.array(
        [[0.0, -1.0, 1.0], [1.0, 0.0, -1.0], [-1.0, 1.0, 0.0]]
    ) / np.sqrt(3.0)
    eye = np.eye(3)
    return eye + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def shift_domain(d: Dataset, cfg: ShiftConfig) -> Dataset:
    """Apply one global shift to every image; labels and tags ride along.

    Translation wraps (np.roll), so shifting twice with t lands exactly at
    2t.  Each stage is skipped when its parameter is zero, making the
    all-zero config the bitwise identity.
    """
    limit = min(d.height, d.width) / 4
    if float(np.hypot(cfg.tx, cfg.ty)) >= limit:
        raise ConfigError(
            f"translation ({cfg.tx}, {cfg.ty}) must stay below {limit} pixels"
        )
    x = d.images.copy()
    if cfg.tx or cfg.ty:
        x = np.roll(x, shift=(cfg.ty, cfg.tx), axis=(2, 3))
    if cfg.hue != 0.0:
        m = _hue_matrix(cfg.hue)
        x = np.einsum("ij,njhw->nihw", m, x).astype(np.float32)
    if cfg.background != 0.0:
        x = x + np.float32(cfg.background)
    if cfg.hue != 0.0 or cfg.background != 0.0:
        x = np.clip(x, 0.0, 1.0)
    return Dataset(
        images=x,
        labels=d.labels,
        num_classes=d.num_classes,
        tags=d.tags,
        provenance=d.provenance
        + f"+shift(hue={cfg.hue:g},t=({cfg.tx},{cfg.ty}),bg={cfg.background:g})",
    )


def _read_idx_header(blob: bytes, path, want_ndim: int) -> tuple[tuple, int]:
    if len(blob) < 4:
        raise BadMagic(f"{path}: too short for an IDX header")
    zero1, zero2, dtype, ndim = blob[0], blob[1], blob[2], blob[3]
    if zero1 != 0 or zero2 != 0 or dtype != 0x08 or ndim != want_ndim:
        raise BadMagic(
            f"{path}: magic {blob[:4].hex()} is not an unsigned-byte "
            f"{want_ndim}-dimensional IDX file"
        )
    need = 4 + 4 * ndim
    if len(blob) < need:
        raise DimensionMismatch(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", blob[4:need])
    return dims, need


def load_idx(images_path, labels_path) -> Dataset:
    """Read the big-endian IDX pair; grayscale bytes become replicated
    3-channel floats in [0, 1]."""
    with open(images_path, "rb") as f:
        iblob = f.read()
    with open(labels_path, "rb") as f:
        lblob = f.read()
    (n, h, w), ioff = _read_idx_header(iblob, images_path, want_ndim=3)
    (nl,), loff = _read_idx_header(lblob, labels_path, want_ndim=1)
    if n == 0 or h == 0 or w == 0:
        raise DimensionMismatch(f"{images_path}: zero-sized dimension {n}x{h}x{w}")
    if len(iblob) - ioff != n * h * w:
        raise DimensionMismatch(
            f"{images_path}: {len(iblob) - ioff} payload bytes for "
            f"{n}x{h}x{w} pixels"
        )
    if len(lblob) - loff != nl:
        raise DimensionMismatch(
            f"{labels_path}: {len(lblob) - loff} payload bytes for {nl} labels"
        )
    if n != nl:
        raise CountMismatch(f"{n} images but {nl} labels")
    gray = np.frombuffer(iblob, dtype=np.uint8, offset=ioff).reshape(n, h, w)
    images = np.repeat(
        (gray.astype(np.float32) / 255.0)[:, None, :, :], 3, axis=1
    )
    labels = np.frombuffer(lblob, dtype=np.uint8, offset=loff).astype(np.int64)
    return Dataset(
        images=images,
        labels=labels,
        num_classes=int(labels.max()) + 1,
        provenance=f"idx({images_path})",
    )


def split(d: Dataset, fractions, rng: RngStream) -> Dataset:
    """Tag every sample train/val/test by a deterministic stratified shuffle.

    Shuffling happens within each class, so every class appears in every
    split whenever the arithmetic allows; a positive fraction that still
    comes out empty (or classless while holding at least num_classes
    samples) is refused.
    """
    f = np.asarray(fractions, dtype=np.float64)
    if f.shape != (len(SPLITS),):
        raise ConfigError(f"need {len(SPLITS)} fractions, got shape {f.shape}")
    if np.any(f < 0) or abs(f.sum() - 1.0) > 1e-9:
        raise ConfigError(f"fractions must be nonnegative and sum to 1, got {f}")
    gen = rng.generator()
    tags = np.full(len(d), -1, dtype=np.int8)
    for c in range(d.num_classes):
        idx = np.flatnonzero(d.labels == c)
        idx = idx[gen.permutation(idx.size)]
        bounds = np.floor(np.cumsum(f) * idx.size + 0.5).astype(int)
        bounds[-1] = idx.size
        lo = 0
        for tag, hi in enumerate(bounds):
            tags[idx[lo:hi]] = tag
            lo = hi
    out = Dataset(
        images=d.images,
        labels=d.labels,
        num_classes=d.num_classes,
        tags=tags,
        provenance=d.provenance + f"+split({f[0]:g}/{f[1]:g}/{f[2]:g})",
    )
    for tag, frac in zip(SPLITS, f):
        size = out.count(tag)
        if frac > 0 and size == 0:
            raise DegenerateSplit(f"{tag} fraction {frac:g} produced no samples")
        if size >= d.num_classes:
            present = np.unique(out.subset(tag)[1])
            if present.size < d.num_classes:
                raise DegenerateSplit(
                    f"{tag} split of {size} samples is missing classes"
                )
    return out
