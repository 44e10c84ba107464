"""Full prompting chain and the simpler prompting variants it subsumes.

The chain applies, in this order and no other: constrained affine warp, then
the per-pixel multiplicative color field, then the additive pattern gated by
the empty-border mask:

    out = warp(x, A) * sigma_hat + M * delta

Swapping the color and additive stages changes the result wherever the mask
region carries a nonzero delta and sigma_hat is not 1, so the order is a
regression-tested part of the contract.

Variants:
  vp      additive pattern on a fixed border (or the whole image), no warp
  evp     fixed centered downscale, pattern on the exposed border
  autovp  like evp but the scale is a learnable raw scalar through a sigmoid
  acavp   the full chain above

Every vp/evp/autovp configuration is exactly representable as an acavp
parameter point; embed_evp_as_acavp / embed_autovp_as_acavp construct it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .color import (
    DEFAULT_R_SIGMA,
    AdditivePrompt,
    ColorPrompt,
    apply_color_additive,
    color_additive_backward,
    constrain_color,
    generate_mask,
)
from .errors import ConfigError, ScaleOutOfRange, ShapeMismatch, TensorFileError
from .numerics import logit_scalar, sigmoid_scalar
from .tensorfile import load_tensors, save_tensors
from .warp import (
    AffineConstrained,
    AffineRanges,
    AffineRaw,
    WarpTape,
    apply_tape,
    build_matrix,
    constrain_affine,
    make_tape,
    scaling_matrix,
    warp_backward,
    warp_bilinear,
    warp_grad_matrix,
)

__all__ = [
    "INIT_SCALE",
    "DEFAULT_EVP_SCALE",
    "VARIANTS",
    "PromptParams",
    "PromptGrads",
    "PipelineTape",
    "BaselineConfig",
    "BaselineTape",
    "init_params",
    "acavp_forward",
    "acavp_backward",
    "border_mask",
    "baseline_forward",
    "baseline_backward",
    "PreparedPrompt",
    "prepare_prompt",
    "prepare_baseline",
    "embed_evp_as_acavp",
    "embed_autovp_as_acavp",
    "params_to_tensors",
    "params_from_tensors",
    "save_params",
    "load_params",
    "save_baseline",
    "load_baseline",
]

# initialization scale: a 224 canvas keeps a 164-ish live region
INIT_SCALE = 0.73
DEFAULT_EVP_SCALE = 164.0 / 224.0

VARIANTS = ("acavp", "vp", "evp", "autovp")


@dataclass
class PromptParams:
    """The complete learnable set: 7 affine scalars, sigma field, delta field."""

    affine: AffineRaw
    ranges: AffineRanges
    color: ColorPrompt
    additive: AdditivePrompt

    def __post_init__(self):
        s = np.asarray(self.color.sigma_raw).shape
        d = np.asarray(self.additive.delta).shape
        if s != d:
            raise ShapeMismatch(f"sigma field {s} != delta field {d}")
        if len(s) != 3 or s[0] != 3:
            raise ShapeMismatch(f"prompt fields must be (3, H, W), got {s}")

    @property
    def height(self) -> int:
        return self.color.sigma_raw.shape[1]

    @property
    def width(self) -> int:
        return self.color.sigma_raw.shape[2]


@dataclass
class PromptGrads:
    """Gradients mirroring PromptParams: (7,) affine, sigma field, delta field."""

    affine: np.ndarray
    sigma: np.ndarray
    delta: np.ndarray


def init_params(
    h: int,
    w: int,
    ranges: AffineRanges | None = None,
    r_sigma: float = DEFAULT_R_SIGMA,
    dtype=np.float32,
) -> PromptParams:
    """Starting point: centered 0.73 downscale, unit color field, zero pattern.

    The raw scale is the logit of 0.73 so the squashed value lands on 0.73;
    the raw sigma field is the logit of 1/R so the squashed field is exactly 1.
    """
    if h <= 0 or w <= 0:
        raise ShapeMismatch(f"image size must be positive, got {h}x{w}")
    s_raw = logit_scalar(INIT_SCALE)
    return PromptParams(
        affine=AffineRaw(sx=s_raw, sy=s_raw),
        ranges=ranges if ranges is not None else AffineRanges(),
        color=ColorPrompt.identity(h, w, r_sigma=r_sigma, dtype=dtype),
        additive=AdditivePrompt.zeros(h, w, dtype=dtype),
    )


@dataclass(eq=False)
class PipelineTape:
    """Intermediates recorded by one forward pass, consumed by backward."""

    warp: WarpTape
    constrained: AffineConstrained
    warped: np.ndarray
    sigma_hat: np.ndarray
    sigma_jacobian: np.ndarray
    mask: np.ndarray
    mask_mode: str


def _check_input(x: np.ndarray, h: int, w: int) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim not in (3, 4) or x.shape[-3:] != (3, h, w):
        raise ShapeMismatch(
            f"expected (..., 3, {h}, {w}) input, got {x.shape}"
        )
    return x


def acavp_forward(
    x: np.ndarray, p: PromptParams, mask_mode: str = "geometric"
) -> tuple[np.ndarray, PipelineTape]:
    """Run the full chain on one image (3,H,W) or a batch (N,3,H,W)."""
    x = _check_input(x, p.height, p.width)
    c = constrain_affine(p.affine, p.ranges)
    warped, wtape = warp_bilinear(x, build_matrix(c))
    mask = generate_mask(warped, wtape, mask_mode)
    sigma_hat, sigma_jac = constrain_color(p.color)
    out = apply_color_additive(warped, sigma_hat, mask, p.additive.delta)
    tape = PipelineTape(
        warp=wtape,
        constrained=c,
        warped=warped,
        sigma_hat=sigma_hat,
        sigma_jacobian=sigma_jac,
        mask=mask,
        mask_mode=mask_mode,
    )
    return out, tape


def acavp_backward(
    tape: PipelineTape, grad_out: np.ndarray, need_input_grad: bool = True
) -> tuple[PromptGrads, np.ndarray | None]:
    """Map a gradient w.r.t. the chain output to gradients w.r.t. all
    parameters (raw scale) and optionally the input pixels.

    The mask is treated as a constant: its dependence on the warp is a set
    membership, not a smooth function, so no gradient flows through it.
    """
    grad_warped, grad_sigma, grad_delta = color_additive_backward(
        grad_out, tape.warped, tape.sigma_hat, tape.mask, tape.sigma_jacobian
    )
    grad_x, grad_affine = warp_backward(
        tape.warp, grad_warped, tape.constrained, need_input_grad=need_input_grad
    )
    grads = PromptGrads(affine=grad_affine, sigma=grad_sigma, delta=grad_delta)
    return grads, grad_x


def border_mask(h: int, w: int, pad: int | None, dtype=np.float32) -> np.ndarray:
    """Frame of ones of the given width; pad=None covers the whole image."""
    if pad is None:
        return np.ones((h, w), dtype=dtype)
    m = np.zeros((h, w), dtype=dtype)
    if pad > 0:
        m[:pad, :] = 1.0
        m[-pad:, :] = 1.0
        m[:, :pad] = 1.0
        m[:, -pad:] = 1.0
    return m


@dataclass
class BaselineConfig:
    """One of the simpler prompting variants.

    vp uses `pad` (border width in pixels, None for the whole image); evp
    uses the fixed `scale`; autovp uses the learnable `scale_raw`, squashed
    through a sigmoid at apply time.
    """

    variant: str
    delta: np.ndarray
    pad: int | None = 28
    scale: float = DEFAULT_EVP_SCALE
    scale_raw: float = field(default_factory=lambda: logit_scalar(DEFAULT_EVP_SCALE))
    mask_mode: str = "geometric"

    def __post_init__(self):
        if self.variant not in ("vp", "evp", "autovp"):
            raise ConfigError(f"unknown baseline variant {self.variant!r}")
        d = np.asarray(self.delta)
        if d.ndim != 3 or d.shape[0] != 3:
            raise ShapeMismatch(f"delta must be (3, H, W), got {d.shape}")
        h, w = d.shape[1:]
        if self.variant == "vp":
            if self.pad is not None and not (0 <= self.pad < min(h, w) / 2):
                raise ConfigError(
                    f"pad {self.pad} must sit in [0, {min(h, w) / 2}) for {h}x{w}"
                )
        if self.variant == "evp" and not (0.0 < self.scale < 1.0):
            raise ScaleOutOfRange(f"evp scale must lie in (0, 1), got {self.scale}")

    @property
    def height(self) -> int:
        return self.delta.shape[1]

    @property
    def width(self) -> int:
        return self.delta.shape[2]


@dataclass(eq=False)
class BaselineTape:
    """What baseline_backward needs: the mask, and for warped variants the
    warp tape plus the squashed scale actually used."""

    variant: str
    mask: np.ndarray
    warp: WarpTape | None
    scale_hat: float | None
    delta_dtype: np.dtype


def _autovp_scale(raw: float) -> float:
    s = sigmoid_scalar(raw)
    # keep strictly inside (0, 1); a saturated 1.0 would be a no-op warp with
    # an empty mask and a 0.0 would be singular
    lo = np.nextafter(0.0, 1.0)
    hi = np.nextafter(1.0, 0.0)
    return float(min(max(s, lo), hi))


def baseline_forward(
    x: np.ndarray, cfg: BaselineConfig
) -> tuple[np.ndarray, BaselineTape]:
    """Apply a vp/evp/autovp prompt to one image or a batch."""
    x = _check_input(x, cfg.height, cfg.width)
    delta = np.asarray(cfg.delta)
    if cfg.variant == "vp":
        mask = border_mask(cfg.height, cfg.width, cfg.pad, dtype=delta.dtype)
        out = x + mask * delta
        tape = BaselineTape("vp", mask, None, None, delta.dtype)
        return out, tape
    scale = cfg.scale if cfg.variant == "evp" else _autovp_scale(cfg.scale_raw)
    warped, wtape = warp_bilinear(x, scaling_matrix(scale))
    mask = generate_mask(warped, wtape, cfg.mask_mode)
    out = warped + mask * delta
    tape = BaselineTape(cfg.variant, mask, wtape, scale, delta.dtype)
    return out, tape


def baseline_backward(tape: BaselineTape, grad_out: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a baseline's learnables given the output gradient.

    Returns {"delta": field} and, for autovp, {"scale_raw": (1,) array}.
    """
    grad_out = np.asarray(grad_out)
    masked = grad_out * tape.mask
    if masked.ndim == 4:
        masked = masked.sum(axis=0)
    grads = {"delta": masked.astype(tape.delta_dtype, copy=False)}
    if tape.variant == "autovp":
        # out = warp(x, S) + const in the warp; pull the matrix gradient back
        # through S = diag(s, s, 1) and the sigmoid squashing
        grad_a = warp_grad_matrix(tape.warp, grad_out)
        s = tape.scale_hat
        grad_raw = (grad_a[0, 0] + grad_a[1, 1]) * s * (1.0 - s)
        grads["scale_raw"] = np.array([grad_raw], dtype=np.float64)
    return grads


class PreparedPrompt:
    """A prompt frozen for repeated application to many images.

    Warp geometry, the squashed color field and the masked additive field
    are all computed once here, so apply() reduces to four gathers and two
    elementwise passes.  Float32 input takes that fast path and reproduces
    the live chain bit for bit; any other dtype falls back to the generic
    chain on the stored tape.  Build via prepare_prompt or prepare_baseline.
    """

    def __init__(
        self,
        variant: str,
        height: int,
        width: int,
        delta: np.ndarray,
        *,
        tape: WarpTape | None = None,
        sigma_hat: np.ndarray | None = None,
        mask: np.ndarray | None = None,
        mask_mode: str = "geometric",
    ):
        self.variant = variant
        self.height = height
        self.width = width
        self.mask_mode = mask_mode
        self.tape = tape
        self.sigma_hat = sigma_hat
        self.delta = np.asarray(delta)
        self.mask = mask
        n = height * width
        d32 = self.delta.astype(np.float32, copy=False).reshape(3, n)
        self._d32 = d32
        if tape is not None:
            self._idx = (tape.idx00, tape.idx01, tape.idx10, tape.idx11)
            self._w32 = tuple(
                w.astype(np.float32)
                for w in (tape.w00, tape.w01, tape.w10, tape.w11)
            )
        else:
            self._idx = None
            self._w32 = None
        self._sig32 = (
            None
            if sigma_hat is None
            else sigma_hat.astype(np.float32, copy=False).reshape(3, n)
        )
        # zero-test masks depend on each image, so only the geometric kind
        # can be folded into the additive field ahead of time
        self._md32 = (
            None
            if mask is None
            else mask.astype(np.float32, copy=False).reshape(n) * d32
        )

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = _check_input(x, self.height, self.width)
        if self._idx is None:
            # vp: no warp, the masked pattern broadcasts over any batch shape
            return x + self._md32.reshape(3, self.height, self.width)
        if x.dtype != np.float32:
            return self._apply_generic(x)
        n = self.height * self.width
        flat = np.ascontiguousarray(x).reshape(x.shape[:-2] + (n,))
        i00, i01, i10, i11 = self._idx
        w00, w01, w10, w11 = self._w32
        out = np.take(flat, i00, axis=-1) * w00
        out += np.take(flat, i01, axis=-1) * w01
        out += np.take(flat, i10, axis=-1) * w10
        out += np.take(flat, i11, axis=-1) * w11
        if self._md32 is not None:
            md = self._md32
        else:
            # the zero test reads the warped image, before any color scaling
            axes = tuple(range(out.ndim - 1))
            md = np.all(out == 0.0, axis=axes).astype(np.float32) * self._d32
        if self._sig32 is not None:
            out *= self._sig32
        out += md
        return out.reshape(x.shape)

    def _apply_generic(self, x: np.ndarray) -> np.ndarray:
        warped = apply_tape(self.tape, x)
        mask = generate_mask(warped, self.tape, self.mask_mode)
        if self.sigma_hat is not None:
            return apply_color_additive(warped, self.sigma_hat, mask, self.delta)
        return warped + mask * self.delta


def _geometric_mask(tape: WarpTape) -> np.ndarray:
    return (1.0 - tape.support_mask).astype(np.float32)


def prepare_prompt(p: PromptParams, mask_mode: str = "geometric") -> PreparedPrompt:
    """Freeze the full chain at the given parameter point."""
    if mask_mode not in _MASK_MODES:
        raise ValueError(f"unknown mask mode: {mask_mode!r}")
    c = constrain_affine(p.affine, p.ranges)
    tape = make_tape(build_matrix(c), p.height, p.width)
    sigma_hat, _ = constrain_color(p.color)
    mask = _geometric_mask(tape) if mask_mode == "geometric" else None
    return PreparedPrompt(
        "acavp",
        p.height,
        p.width,
        p.additive.delta,
        tape=tape,
        sigma_hat=sigma_hat,
        mask=mask,
        mask_mode=mask_mode,
    )


def prepare_baseline(cfg: BaselineConfig) -> PreparedPrompt:
    """Freeze a vp/evp/autovp prompt at its current configuration."""
    h, w = cfg.height, cfg.width
    if cfg.variant == "vp":
        mask = border_mask(h, w, cfg.pad, dtype=np.float32)
        return PreparedPrompt("vp", h, w, cfg.delta, mask=mask)
    scale = cfg.scale if cfg.variant == "evp" else _autovp_scale(cfg.scale_raw)
    tape = make_tape(scaling_matrix(scale), h, w)
    mask = _geometric_mask(tape) if cfg.mask_mode == "geometric" else None
    return PreparedPrompt(
        cfg.variant,
        h,
        w,
        cfg.delta,
        tape=tape,
        mask=mask,
        mask_mode=cfg.mask_mode,
    )


def _embed_scale(scale: float, delta: np.ndarray, ranges, r_sigma, raw=None):
    d = np.asarray(delta)
    if d.ndim != 3 or d.shape[0] != 3:
        raise ShapeMismatch(f"delta must be (3, H, W), got {d.shape}")
    h, w = d.shape[1:]
    s_raw = logit_scalar(scale) if raw is None else raw
    return PromptParams(
        affine=AffineRaw(sx=s_raw, sy=s_raw),
        ranges=ranges if ranges is not None else AffineRanges(),
        color=ColorPrompt.identity(h, w, r_sigma=r_sigma, dtype=d.dtype),
        additive=AdditivePrompt(d.copy()),
    )


def embed_evp_as_acavp(
    cfg: BaselineConfig,
    ranges: AffineRanges | None = None,
    r_sigma: float = DEFAULT_R_SIGMA,
) -> PromptParams:
    """The acavp parameter point reproducing an evp configuration.

    Scaling-only affine at the evp scale, color field pinned to 1, same
    pattern. Outputs agree with baseline_forward per pixel to 1e-5 or better.
    """
    if not (0.0 < cfg.scale < 1.0):
        raise ScaleOutOfRange(f"evp scale must lie in (0, 1), got {cfg.scale}")
    return _embed_scale(cfg.scale, cfg.delta, ranges, r_sigma)


def embed_autovp_as_acavp(
    cfg: BaselineConfig,
    ranges: AffineRanges | None = None,
    r_sigma: float = DEFAULT_R_SIGMA,
) -> PromptParams:
    """The acavp parameter point reproducing an autovp configuration.

    The raw scale passes through unchanged: both paths apply the identical
    sigmoid, so the warp matrices match bitwise.
    """
    return _embed_scale(0.5, cfg.delta, ranges, r_sigma, raw=cfg.scale_raw)


_AFFINE_KEY = "affine.raw"
_RANGES_KEY = "affine.ranges"
_SIGMA_KEY = "color.sigma"
_RSIGMA_KEY = "color.range"
_DELTA_KEY = "additive.delta"


def params_to_tensors(p: PromptParams) -> dict[str, np.ndarray]:
    return {
        _AFFINE_KEY: p.affine.as_array(),
        _RANGES_KEY: p.ranges.as_array(),
        _SIGMA_KEY: p.color.sigma_raw,
        _RSIGMA_KEY: np.array([p.color.r_sigma], dtype=np.float64),
        _DELTA_KEY: p.additive.delta,
    }


def params_from_tensors(tensors: dict[str, np.ndarray]) -> PromptParams:
    missing = [
        k
        for k in (_AFFINE_KEY, _RANGES_KEY, _SIGMA_KEY, _RSIGMA_KEY, _DELTA_KEY)
        if k not in tensors
    ]
    if missing:
        raise TensorFileError(f"prompt file is missing entries: {missing}")
    raw = tensors[_AFFINE_KEY]
    rng = tensors[_RANGES_KEY]
    rs = tensors[_RSIGMA_KEY]
    if raw.shape != (7,):
        raise ShapeMismatch(f"{_AFFINE_KEY} must be (7,), got {raw.shape}")
    if rng.shape != (3,):
        raise ShapeMismatch(f"{_RANGES_KEY} must be (3,), got {rng.shape}")
    if rs.size != 1:
        raise ShapeMismatch(f"{_RSIGMA_KEY} must hold one value, got {rs.shape}")
    return PromptParams(
        affine=AffineRaw.from_array(raw),
        ranges=AffineRanges(float(rng[0]), float(rng[1]), float(rng[2])),
        color=ColorPrompt(tensors[_SIGMA_KEY], float(rs.reshape(-1)[0])),
        additive=AdditivePrompt(tensors[_DELTA_KEY]),
    )


def save_params(path, p: PromptParams) -> None:
    save_tensors(path, params_to_tensors(p))


def load_params(path) -> PromptParams:
    return params_from_tensors(load_tensors(path))


_BASE_DELTA_KEY = "additive.delta"
_BASE_PAD_KEY = "baseline.pad"
_BASE_SCALE_KEY = "baseline.scale"
_BASE_SCALE_RAW_KEY = "baseline.scale_raw"
_BASE_MASK_KEY = "baseline.mask"
_BASE_VARIANT_KEY = "meta.variant"

_MASK_MODES = ("geometric", "zero-test")


def save_baseline(path, cfg: BaselineConfig) -> None:
    """Persist a vp/evp/autovp prompt; scalars ride along as tiny entries."""
    pad = -1.0 if cfg.pad is None else float(cfg.pad)
    save_tensors(
        path,
        {
            _BASE_DELTA_KEY: cfg.delta,
            _BASE_PAD_KEY: np.array([pad], dtype=np.float64),
            _BASE_SCALE_KEY: np.array([cfg.scale], dtype=np.float64),
            _BASE_SCALE_RAW_KEY: np.array([cfg.scale_raw], dtype=np.float64),
            _BASE_MASK_KEY: np.array(
                [_MASK_MODES.index(cfg.mask_mode)], dtype=np.float64
            ),
            _BASE_VARIANT_KEY: np.array(
                [VARIANTS.index(cfg.variant)], dtype=np.float64
            ),
        },
    )


def load_baseline(path) -> BaselineConfig:
    tensors = load_tensors(path)
    missing = [
        k
        for k in (
            _BASE_DELTA_KEY,
            _BASE_PAD_KEY,
            _BASE_SCALE_KEY,
            _BASE_SCALE_RAW_KEY,
            _BASE_MASK_KEY,
            _BASE_VARIANT_KEY,
        )
        if k not in tensors
    ]
    if missing:
        raise TensorFileError(f"baseline file is missing entries: {missing}")
    vi = int(round(float(tensors[_BASE_VARIANT_KEY].reshape(-1)[0])))
    if not 0 <= vi < len(VARIANTS) or VARIANTS[vi] == "acavp":
        raise ConfigError(f"stored variant index {vi} is not a baseline")
    mi = int(round(float(tensors[_BASE_MASK_KEY].reshape(-1)[0])))
    if not 0 <= mi < len(_MASK_MODES):
        raise ConfigError(f"stored mask mode index {mi} is unknown")
    pad = float(tensors[_BASE_PAD_KEY].reshape(-1)[0])
    return BaselineConfig(
        variant=VARIANTS[vi],
        delta=tensors[_BASE_DELTA_KEY],
        pad=None if pad < 0 else int(round(pad)),
        scale=float(tensors[_BASE_SCALE_KEY].reshape(-1)[0]),
        scale_raw=float(tensors[_BASE_SCALE_RAW_KEY].reshape(-1)[0]),
        mask_mode=_MASK_MODES[mi],
    )
