"""Prompt optimization: SGD with momentum, cosine-annealed learning rate,
per-group gradient normalization, clipping, and best-on-validation
checkpoint selection.

The model stays frozen throughout; only the prompt parameters move.  Each
variant exposes the same flat view to the optimizer, a dict of named
parameter groups:

    acavp   affine (7,), color (3,H,W), additive (3,H,W)
    vp/evp  additive (3,H,W)
    autovp  additive (3,H,W), scale (1,)

Batches are processed in fixed-size chunks and the per-chunk gradients are
summed in chunk order, so results are bitwise reproducible for any worker
count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .augment import augment_batch
from .errors import (
    AffineSingular,
    ClassMismatch,
    ConfigError,
    EmptySplit,
    ShapeMismatch,
)
from .color import DEFAULT_R_SIGMA, AdditivePrompt, ColorPrompt
from .model import (
    FrozenModel,
    checksum_model,
    cross_entropy,
    model_forward,
    model_input_grad,
)
from .pipeline import (
    DEFAULT_EVP_SCALE,
    VARIANTS,
    BaselineConfig,
    PromptGrads,
    PromptParams,
    acavp_backward,
    acavp_forward,
    baseline_backward,
    baseline_forward,
    init_params,
    save_baseline,
    save_params,
)
from .rng import RngStream
from .warp import AffineRanges, AffineRaw

__all__ = [
    "TrainConfig",
    "TrainState",
    "MetricsLog",
    "TrainResult",
    "cosine_lr",
    "compute_loss",
    "clip_grads",
    "normalize_grads",
    "init_train_state",
    "sgd_momentum_step",
    "train_prompt",
]

AUGMENT_MODES = ("none", "trivial")

# fixed micro-batch size: chunk boundaries never depend on the worker count,
# so the ordered reduction gives identical floats for 1 or N workers
_MICRO_BATCH = 32

_EVAL_BATCH = 256


@dataclass
class TrainConfig:
    """Optimization recipe.  Defaults are the desk-scale settings; the
    large-scale counterparts (1000 epochs, batches of 256) remain a field
    away."""

    lr0: float = 40.0
    epochs: int = 200
    momentum: float = 0.9
    batch_size: int = 64
    clip_value: float = 0.001
    grad_normalize: bool = True
    weight_decay: float = 0.0
    mse_reg_weight: float = 0.0
    augment: str = "none"
    seed: int = 0

    def __post_init__(self):
        # lr0=0 and epochs=0 are allowed on purpose: both are degenerate
        # diagnostic settings (frozen params, init-only evaluation)
        if self.lr0 < 0:
            raise ConfigError(f"lr0 must be >= 0, got {self.lr0}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.clip_value > 0:
            raise ConfigError(f"clip_value must be > 0, got {self.clip_value}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.mse_reg_weight < 0:
            raise ConfigError(
                f"mse_reg_weight must be >= 0, got {self.mse_reg_weight}"
            )
        if self.augment not in AUGMENT_MODES:
            raise ConfigError(
                f"augment must be one of {AUGMENT_MODES}, got {self.augment!r}"
            )


@dataclass
class TrainState:
    """Optimizer state: parameter groups, matching velocity buffers, and a
    step counter."""

    params: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray]
    momentum: float
    step: int = 0

    def __post_init__(self):
        if set(self.params) != set(self.velocity):
            raise ShapeMismatch(
                f"velocity groups {sorted(self.velocity)} do not match "
                f"parameter groups {sorted(self.params)}"
            )
        for k, p in self.params.items():
            if self.velocity[k].shape != p.shape:
                raise ShapeMismatch(
                    f"velocity for {k!r} has shape {self.velocity[k].shape}, "
                    f"params have {p.shape}"
                )


def init_train_state(params: dict[str, np.ndarray], momentum: float) -> TrainState:
    owned = {k: np.array(v) for k, v in params.items()}
    vel = {k: np.zeros(v.shape, dtype=np.float64) for k, v in params.items()}
    return TrainState(params=owned, velocity=vel, momentum=momentum)


MetricsRow = tuple[int, float, float, float, float]


@dataclass
class MetricsLog:
    """Per-epoch training record, rendered as CSV with 6 significant
    digits."""

    HEADER = "epoch,lr,train_loss,train_acc,val_acc"

    rows: list[MetricsRow] = field(default_factory=list)

    def append(self, epoch, lr, train_loss, train_acc, val_acc) -> None:
        self.rows.append(
            (int(epoch), float(lr), float(train_loss), float(train_acc), float(val_acc))
        )

    def to_csv(self) -> str:
        lines = [self.HEADER]
        for e, lr, tl, ta, va in self.rows:
            lines.append(f"{e},{lr:.6g},{tl:.6g},{ta:.6g},{va:.6g}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        with open(path, "w", newline="\n") as f:
            f.write(self.to_csv())

    @property
    def val_accuracies(self) -> list[float]:
        return [r[4] for r in self.rows]


@dataclass
class TrainResult:
    """Best-on-validation snapshot plus the full metrics trail.

    params is the best-epoch snapshot; final_params is where the optimizer
    actually ended, kept for invariant checks and warm restarts.
    """

    variant: str
    params: object
    final_params: object
    metrics: MetricsLog
    best_epoch: int
    best_val_accuracy: float
    epoch0_val_accuracy: float

    def write_params(self, path) -> None:
        if isinstance(self.params, PromptParams):
            save_params(path, self.params)
        else:
            save_baseline(path, self.params)


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Half-cosine decay from lr0 at step 0 to 0 at step == total_steps."""
    if total_steps < 1:
        raise ConfigError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def compute_loss(logits, labels, x, x_tilde, cfg: TrainConfig):
    """Cross-entropy plus the optional pull toward the unprompted image.

    Returns (scalar loss, gradient w.r.t. logits).  The image-space term
    mse_reg_weight * mean((x_tilde - x)^2) enters the returned loss; its
    gradient is injected directly on x_tilde by the training loop.
    """
    x = np.asarray(x)
    x_tilde = np.asarray(x_tilde)
    if x.shape != x_tilde.shape:
        raise ShapeMismatch(
            f"prompted batch {x_tilde.shape} does not match input {x.shape}"
        )
    loss, grad_logits = cross_entropy(logits, labels)
    if cfg.mse_reg_weight > 0.0:
        d = x_tilde.astype(np.float64) - x.astype(np.float64)
        loss = loss + cfg.mse_reg_weight * float(np.mean(d * d))
    return loss, grad_logits


def _group_dict(g: PromptGrads) -> dict[str, np.ndarray]:
    return {"affine": g.affine, "color": g.sigma, "additive": g.delta}


def _from_group_dict(d: dict[str, np.ndarray]) -> PromptGrads:
    return PromptGrads(affine=d["affine"], sigma=d["color"], delta=d["additive"])


def _normalize_dict(grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for k, g in grads.items():
        n = float(np.linalg.norm(np.asarray(g, dtype=np.float64)))
        out[k] = g if n < 1e-12 else g / n
    return out


def _clip_dict(grads: dict[str, np.ndarray], clip_value: float) -> dict[str, np.ndarray]:
    return {k: np.clip(g, -clip_value, clip_value) for k, g in grads.items()}


def normalize_grads(g: PromptGrads) -> PromptGrads:
    """Scale each parameter group to unit L2 norm; groups with norm below
    1e-12 pass through so a dead group cannot blow up."""
    return _from_group_dict(_normalize_dict(_group_dict(g)))


def clip_grads(g: PromptGrads, clip_value: float) -> PromptGrads:
    """Elementwise clamp to [-clip_value, +clip_value]."""
    if not clip_value > 0:
        raise ConfigError(f"clip_value must be > 0, got {clip_value}")
    return _from_group_dict(_clip_dict(_group_dict(g), clip_value))


def sgd_momentum_step(
    state: TrainState, grads: dict[str, np.ndarray], lr: float, weight_decay: float
) -> TrainState:
    """v <- momentum*v + (g + weight_decay*theta); theta <- theta - lr*v.

    Velocity is kept in float64; the parameter write-back rounds once to the
    group's own dtype.
    """
    for k, theta in state.params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        t64 = theta.astype(np.float64)
        if weight_decay != 0.0:
            g = g + weight_decay * t64
        v = state.velocity[k]
        v *= state.momentum
        v += g
        state.params[k] = (t64 - lr * v).astype(theta.dtype)
    state.step += 1
    return state


class _AcavpAdapter:
    """Flat-dict view over the full-chain parameters."""

    variant = "acavp"

    def __init__(self, h, w, ranges, r_sigma, mask_mode):
        p = init_params(h, w, ranges=ranges, r_sigma=r_sigma)
        self.ranges = p.ranges
        self.r_sigma = p.color.r_sigma
        self.mask_mode = mask_mode
        self._init = {
            "affine": p.affine.as_array(),
            "color": np.array(p.color.sigma_raw),
            "additive": np.array(p.additive.delta),
        }

    def initial(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self._init.items()}

    def materialize(self, flat) -> PromptParams:
        return PromptParams(
            affine=AffineRaw.from_array(flat["affine"]),
            ranges=self.ranges,
            color=ColorPrompt(flat["color"], r_sigma=self.r_sigma),
            additive=AdditivePrompt(flat["additive"]),
        )

    def forward(self, flat, x):
        return acavp_forward(x, self.materialize(flat), mask_mode=self.mask_mode)

    def backward(self, tape, grad_out) -> dict[str, np.ndarray]:
        grads, _ = acavp_backward(tape, grad_out, need_input_grad=False)
        return _group_dict(grads)

    def result(self, flat) -> PromptParams:
        return self.materialize({k: v.copy() for k, v in flat.items()})


class _BaselineAdapter:
    """Flat-dict view over a vp/evp/autovp prompt."""

    def __init__(self, variant, h, w, pad, scale, mask_mode):
        self.variant = variant
        self._cfg = BaselineConfig(
            variant,
            np.zeros((3, h, w), dtype=np.float32),
            pad=pad,
            scale=scale,
            mask_mode=mask_mode,
        )

    def initial(self) -> dict[str, np.ndarray]:
        flat = {"additive": self._cfg.delta.copy()}
        if self.variant == "autovp":
            flat["scale"] = np.array([self._cfg.scale_raw], dtype=np.float64)
        return flat

    def materialize(self, flat) -> BaselineConfig:
        kwargs = {"delta": flat["additive"]}
        if self.variant == "autovp":
            kwargs["scale_raw"] = float(flat["scale"][0])
        return replace(self._cfg, **kwargs)

    def forward(self, flat, x):
        return baseline_forward(x, self.materialize(flat))

    def backward(self, tape, grad_out) -> dict[str, np.ndarray]:
        g = baseline_backward(tape, grad_out)
        flat = {"additive": g["delta"]}
        if "scale_raw" in g:
            flat["scale"] = g["scale_raw"]
        return flat

    def result(self, flat) -> BaselineConfig:
        return self.materialize({k: v.copy() for k, v in flat.items()})


def _make_adapter(variant, h, w, pad, scale, mask_mode, ranges, r_sigma):
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    if variant == "acavp":
        return _AcavpAdapter(h, w, ranges, r_sigma, mask_mode)
    return _BaselineAdapter(variant, h, w, pad, scale, mask_mode)


def _check_data(data, model: FrozenModel):
    for name in ("train_x", "train_y", "val_x", "val_y"):
        if not hasattr(data, name):
            raise ShapeMismatch(f"data object lacks {name}")
    for split in ("train", "val"):
        x = np.asarray(getattr(data, f"{split}_x"))
        y = np.asarray(getattr(data, f"{split}_y"))
        if x.shape[0] == 0:
            raise EmptySplit(f"{split} split is empty")
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeMismatch(
                f"{split}_x must be (N, 3, H, W), got {x.shape}"
            )
        if y.shape != (x.shape[0],):
            raise ShapeMismatch(
                f"{split}_y has shape {y.shape} for {x.shape[0]} images"
            )
        if y.min() < 0 or y.max() >= model.num_classes:
            raise ClassMismatch(
                f"{split} labels span [{y.min()}, {y.max()}] but the model "
                f"has {model.num_classes} classes"
            )
    if data.train_x.shape[2:] != data.val_x.shape[2:]:
        raise ShapeMismatch(
            f"train images {data.train_x.shape[2:]} vs val "
            f"{data.val_x.shape[2:]}"
        )


def _chunk_spans(n: int, size: int) -> list[tuple[int, int]]:
    return [(lo, min(lo + size, n)) for lo in range(0, n, size)]


def _run_jobs(pool, fn, spans):
    if pool is None:
        return [fn(s) for s in spans]
    return list(pool.map(fn, spans))


def _batch_pass(adapter, params, model, xb, yb, cfg, pool, step):
    """Forward/backward over one batch; returns (mean loss, correct count,
    summed gradient dict)."""
    n = xb.shape[0]
    elems = xb[0].size

    def run(span):
        lo, hi = span
        xc, yc = xb[lo:hi], yb[lo:hi]
        wgt = (hi - lo) / n
        try:
            xt, tape = adapter.forward(params, xc)
            logits, mtape = model_forward(xt, model)
            loss, glog = compute_loss(logits, yc, xc, xt, cfg)
            glog = (glog * wgt).astype(glog.dtype)
            gxt = model_input_grad(mtape, glog, model)
            if cfg.mse_reg_weight > 0.0:
                coeff = 2.0 * cfg.mse_reg_weight / (n * elems)
                gxt = (gxt + coeff * (xt - xc)).astype(gxt.dtype)
            grads = adapter.backward(tape, gxt)
        except AffineSingular as e:
            raise AffineSingular(f"training step {step}: {e}") from e
        correct = int((logits.argmax(axis=1) == yc).sum())
        return loss * wgt, correct, grads

    loss_sum, correct_sum, total = 0.0, 0, None
    for loss, correct, grads in _run_jobs(pool, run, _chunk_spans(n, _MICRO_BATCH)):
        loss_sum += loss
        correct_sum += correct
        if total is None:
            total = grads
        else:
            total = {k: total[k] + grads[k] for k in total}
    return loss_sum, correct_sum, total


def _accuracy(adapter, params, model, x, y, pool) -> float:
    def run(span):
        lo, hi = span
        xt, _ = adapter.forward(params, x[lo:hi])
        logits, _ = model_forward(xt, model)
        return int((logits.argmax(axis=1) == y[lo:hi]).sum())

    spans = _chunk_spans(x.shape[0], _EVAL_BATCH)
    return sum(_run_jobs(pool, run, spans)) / x.shape[0]


def train_prompt(
    cfg: TrainConfig,
    model: FrozenModel,
    data,
    variant: str = "acavp",
    *,
    workers: int = 1,
    pad: int | None = 28,
    scale: float = DEFAULT_EVP_SCALE,
    mask_mode: str = "geometric",
    ranges: AffineRanges | None = None,
    r_sigma: float = DEFAULT_R_SIGMA,
) -> TrainResult:
    """Fit a prompt of the given variant against a frozen model.

    Per-epoch loop: optional augmentation, variant forward, model forward,
    loss, model input gradient, variant backward, optional per-group
    normalization, clip, SGD step.  Validation runs after every epoch with
    the current parameters and no augmentation; the returned snapshot is the
    best validation epoch (including the untouched initialization as epoch
    0).
    """
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")
    _check_data(data, model)
    # bind the splits once: dataset accessors may hand out fresh copies
    train_x = np.asarray(data.train_x)
    train_y = np.asarray(data.train_y)
    val_x = np.asarray(data.val_x)
    val_y = np.asarray(data.val_y)
    h, w = train_x.shape[2:]
    adapter = _make_adapter(variant, h, w, pad, scale, mask_mode, ranges, r_sigma)
    checksum_before = checksum_model(model)
    state = init_train_state(adapter.initial(), cfg.momentum)
    rng = RngStream(cfg.seed)
    n = train_x.shape[0]
    log = MetricsLog()
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        val0 = _accuracy(adapter, state.params, model, val_x, val_y, pool)
        best_epoch, best_acc = 0, val0
        best_params = {k: v.copy() for k, v in state.params.items()}
        for epoch in range(1, cfg.epochs + 1):
            lr = cosine_lr(epoch - 1, cfg.epochs, cfg.lr0)
            order = rng.child(f"shuffle/{epoch}").generator().permutation(n)
            loss_sum, correct_sum = 0.0, 0
            for bi, lo in enumerate(range(0, n, cfg.batch_size)):
                idx = order[lo : lo + cfg.batch_size]
                xb = train_x[idx]
                yb = train_y[idx]
                if cfg.augment == "trivial":
                    xb = augment_batch(xb, rng.child(f"augment/{epoch}/{bi}"))
                loss, correct, grads = _batch_pass(
                    adapter, state.params, model, xb, yb, cfg, pool, state.step
                )
                if cfg.grad_normalize:
                    grads = _normalize_dict(grads)
                grads = _clip_dict(grads, cfg.clip_value)
                sgd_momentum_step(state, grads, lr, cfg.weight_decay)
                loss_sum += loss * idx.shape[0]
                correct_sum += correct
            val = _accuracy(adapter, state.params, model, val_x, val_y, pool)
            log.append(epoch, lr, loss_sum / n, correct_sum / n, val)
            if val > best_acc:
                best_epoch, best_acc = epoch, val
                best_params = {k: v.copy() for k, v in state.params.items()}
    finally:
        if pool is not None:
            pool.shutdown()
    if checksum_model(model) != checksum_before:
        raise RuntimeError("frozen model weights changed during training")
    return TrainResult(
        variant=variant,
        params=adapter.result(best_params),
        final_params=adapter.result(state.params),
        metrics=log,
        best_epoch=best_epoch,
        best_val_accuracy=best_acc,
        epoch0_val_accuracy=val0,
    )
