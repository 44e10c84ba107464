"""Small fixed-weight classifier with a hand-derived input-gradient path.

Architecture: conv 3->8 (k3 s2 p1), ReLU, conv 8->16 (k3 s2 p1), ReLU,
global average pool, linear 16->K.  The model exists to provide a frozen
nonlinear function with meaningful input gradients; prompt training consumes
d(loss)/d(input) and never touches the weights.  Weight gradients exist only
inside pretrain_source, which builds the model in the first place.

Convolutions run as im2col matmuls; the input gradient redistributes each
output gradient through the kernel taps onto the padded input, which is the
transpose of the same correlation.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeMismatch, TapeMismatch
from .numerics import softmax
from .rng import RngStream
from .tensorfile import load_tensors, save_tensors

__all__ = [
    "FrozenModel",
    "ModelTape",
    "PretrainConfig",
    "PretrainResult",
    "init_model",
    "model_forward",
    "head_forward",
    "model_input_grad",
    "dropout_feature",
    "cross_entropy",
    "checksum_model",
    "pretrain_source",
    "model_to_tensors",
    "model_from_tensors",
    "save_model",
    "load_model",
]

_K = 3
_STRIDE = 2
_PAD = 1
_C1 = 8
_C2 = 16


@dataclass(frozen=True)
class FrozenModel:
    """Immutable weight set; arrays are marked read-only on construction."""

    conv1_w: np.ndarray  # (8, 3, 3, 3)
    conv1_b: np.ndarray  # (8,)
    conv2_w: np.ndarray  # (16, 8, 3, 3)
    conv2_b: np.ndarray  # (16,)
    fc_w: np.ndarray  # (K, 16)
    fc_b: np.ndarray  # (K,)
    num_classes: int

    def __post_init__(self):
        expect = {
            "conv1_w": (_C1, 3, _K, _K),
            "conv1_b": (_C1,),
            "conv2_w": (_C2, _C1, _K, _K),
            "conv2_b": (_C2,),
            "fc_w": (self.num_classes, _C2),
            "fc_b": (self.num_classes,),
        }
        for name, shape in expect.items():
            arr = np.asarray(getattr(self, name), dtype=np.float32)
            if arr.shape != shape:
                raise ShapeMismatch(f"{name} must be {shape}, got {arr.shape}")
            frozen = arr.copy()
            frozen.flags.writeable = False
            object.__setattr__(self, name, frozen)

    def weight_arrays(self) -> tuple[np.ndarray, ...]:
        return (
            self.conv1_w,
            self.conv1_b,
            self.conv2_w,
            self.conv2_b,
            self.fc_w,
            self.fc_b,
        )


@dataclass(eq=False)
class ModelTape:
    """Pre-activations and pooled features cached by one forward pass."""

    x_shape: tuple
    single: bool
    pre1: np.ndarray
    pre2: np.ndarray
    feats: np.ndarray


def init_model(num_classes: int, rng: RngStream) -> FrozenModel:
    """He-scaled random weights, zero biases."""
    gen = rng.generator()
    w1 = gen.normal(0.0, np.sqrt(2.0 / (3 * _K * _K)), (_C1, 3, _K, _K))
    w2 = gen.normal(0.0, np.sqrt(2.0 / (_C1 * _K * _K)), (_C2, _C1, _K, _K))
    fw = gen.normal(0.0, np.sqrt(2.0 / _C2), (num_classes, _C2))
    return FrozenModel(
        conv1_w=w1.astype(np.float32),
        conv1_b=np.zeros(_C1, dtype=np.float32),
        conv2_w=w2.astype(np.float32),
        conv2_b=np.zeros(_C2, dtype=np.float32),
        fc_w=fw.astype(np.float32),
        fc_b=np.zeros(num_classes, dtype=np.float32),
        num_classes=num_classes,
    )


def _windows(x: np.ndarray) -> np.ndarray:
    """Strided k x k patches of the padded input: (N, Ho, Wo, C, k, k)."""
    xp = np.pad(x, ((0, 0), (0, 0), (_PAD, _PAD), (_PAD, _PAD)))
    win = sliding_window_view(xp, (_K, _K), axis=(2, 3))
    return win[:, :, ::_STRIDE, ::_STRIDE].transpose(0, 2, 3, 1, 4, 5)


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, want_windows=False):
    win = _windows(x)
    n, ho, wo = win.shape[:3]
    flat = win.reshape(n, ho, wo, -1)
    # one 2D gemm over all output locations; the 4D matmul form dispatches
    # thousands of tiny batched products instead
    cols = flat.reshape(-1, flat.shape[-1])
    out = (cols @ w.reshape(w.shape[0], -1).T + b).reshape(n, ho, wo, -1)
    out = out.transpose(0, 3, 1, 2)
    return (out, win) if want_windows else (out, None)


def _conv_input_grad(dy: np.ndarray, w: np.ndarray, in_shape: tuple) -> np.ndarray:
    """d(loss)/d(conv input) given d(loss)/d(conv output)."""
    n, c, h, wd = in_shape
    ho, wo = dy.shape[2:]
    cout = w.shape[0]
    buf = np.zeros((n, c, h + 2 * _PAD, wd + 2 * _PAD), dtype=dy.dtype)
    # mix all nine kernel taps in a single gemm, then scatter with nine
    # strided adds; the per-tap matmul form is an order of magnitude slower
    flat = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(-1, cout)
    mixed = (flat @ w.reshape(cout, -1)).reshape(n, ho, wo, c, _K, _K)
    mixed = mixed.transpose(0, 3, 4, 5, 1, 2)
    for ki in range(_K):
        for kj in range(_K):
            buf[
                :,
                :,
                ki : ki + ho * _STRIDE : _STRIDE,
                kj : kj + wo * _STRIDE : _STRIDE,
            ] += mixed[:, :, ki, kj]
    return buf[:, :, _PAD : _PAD + h, _PAD : _PAD + wd]


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeMismatch(f"expected (3, H, W) or (N, 3, H, W), got {x.shape}")


def model_forward(x: np.ndarray, m: FrozenModel) -> tuple[np.ndarray, ModelTape]:
    """Logits for one image or a batch, plus the tape for the input gradient."""
    xb, single = _as_batch(x)
    if xb.shape[1] != 3 or xb.shape[2] < 8 or xb.shape[3] < 8:
        raise ShapeMismatch(f"model needs (N, 3, >=8, >=8) input, got {xb.shape}")
    pre1, _ = _conv_forward(xb, m.conv1_w, m.conv1_b)
    a1 = np.maximum(pre1, 0.0)
    pre2, _ = _conv_forward(a1, m.conv2_w, m.conv2_b)
    a2 = np.maximum(pre2, 0.0)
    feats = a2.mean(axis=(2, 3))
    logits = head_forward(feats, m)
    tape = ModelTape(
        x_shape=xb.shape, single=single, pre1=pre1, pre2=pre2, feats=feats
    )
    return (logits[0] if single else logits), tape


def head_forward(feats: np.ndarray, m: FrozenModel) -> np.ndarray:
    """The linear class head on pooled features."""
    return feats @ m.fc_w.T + m.fc_b


def model_input_grad(
    tape: ModelTape,
    grad_logits: np.ndarray,
    m: FrozenModel,
    feature_mask: np.ndarray | None = None,
) -> np.ndarray:
    """d(loss)/d(input pixels).  Weights receive nothing.

    feature_mask, when given, is the (already scaled) dropout mask that was
    applied to the pooled features before the head on this forward.
    """
    g = np.asarray(grad_logits)
    if tape.single:
        g = g[None]
    n = tape.x_shape[0]
    if g.shape != (n, m.num_classes):
        raise TapeMismatch(
            f"grad_logits shape {grad_logits.shape} does not match "
            f"batch {n} x {m.num_classes}"
        )
    if tape.pre1.shape[0] != n:
        raise TapeMismatch("tape does not belong to this batch")
    dfeats = g @ m.fc_w
    if feature_mask is not None:
        dfeats = dfeats * feature_mask
    h2, w2 = tape.pre2.shape[2:]
    da2 = np.broadcast_to(
        dfeats[:, :, None, None] / (h2 * w2), tape.pre2.shape
    ) * (tape.pre2 > 0)
    da1 = _conv_input_grad(da2, m.conv2_w, tape.pre1.shape) * (tape.pre1 > 0)
    dx = _conv_input_grad(da1, m.conv1_w, tape.x_shape)
    return dx[0] if tape.single else dx


def dropout_feature(
    feats: np.ndarray, rate: float, rng: RngStream, training: bool
) -> tuple[np.ndarray, np.ndarray]:
    """Inverted-scaling dropout on pooled features.

    Returns (features, mask); the mask already carries the 1/(1-rate) keep
    scaling and multiplies gradients on the way back.  Identity outside
    training or at rate 0.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    feats = np.asarray(feats)
    if not training or rate == 0.0:
        return feats, np.ones_like(feats)
    keep = rng.generator().random(feats.shape) >= rate
    mask = keep.astype(feats.dtype) / (1.0 - rate)
    return feats * mask, mask


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. logits."""
    lg = np.asarray(logits, dtype=np.float64)
    single = lg.ndim == 1
    if single:
        lg = lg[None]
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if y.shape[0] != lg.shape[0]:
        raise ShapeMismatch(f"{y.shape[0]} labels for {lg.shape[0]} logit rows")
    if np.any((y < 0) | (y >= lg.shape[1])):
        raise ShapeMismatch("label outside class range")
    m = lg.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(lg - m).sum(axis=1))
    loss = float((lse - lg[np.arange(lg.shape[0]), y]).mean())
    grad = softmax(lg)
    grad[np.arange(lg.shape[0]), y] -= 1.0
    grad /= lg.shape[0]
    grad = grad.astype(np.asarray(logits).dtype, copy=False)
    return loss, (grad[0] if single else grad)


_ENTRY_ORDER = ("conv1.w", "conv1.b", "conv2.w", "conv2.b", "fc.w", "fc.b")


def model_to_tensors(m: FrozenModel) -> dict[str, np.ndarray]:
    t = dict(zip(_ENTRY_ORDER, m.weight_arrays()))
    t["meta.num_classes"] = np.array([m.num_classes], dtype=np.float32)
    return t


def model_from_tensors(tensors: dict[str, np.ndarray]) -> FrozenModel:
    from .errors import TensorFileError

    missing = [k for k in (*_ENTRY_ORDER, "meta.num_classes") if k not in tensors]
    if missing:
        raise TensorFileError(f"model file is missing entries: {missing}")
    k = int(round(float(tensors["meta.num_classes"].reshape(-1)[0])))
    return FrozenModel(
        conv1_w=tensors["conv1.w"],
        conv1_b=tensors["conv1.b"],
        conv2_w=tensors["conv2.w"],
        conv2_b=tensors["conv2.b"],
        fc_w=tensors["fc.w"],
        fc_b=tensors["fc.b"],
        num_classes=k,
    )


def save_model(path, m: FrozenModel) -> None:
    save_tensors(path, model_to_tensors(m))


def load_model(path) -> FrozenModel:
    return model_from_tensors(load_tensors(path))


def checksum_model(m: FrozenModel) -> str:
    """Stable digest of all weights; training must leave it unchanged."""
    h = hashlib.blake2b(digest_size=16)
    for arr in m.weight_arrays():
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update(str(m.num_classes).encode())
    return h.hexdigest()


@dataclass
class PretrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    max_epochs: int = 30
    target_val_acc: float = 0.9
    weight_decay: float = 0.0


@dataclass
class PretrainResult:
    model: FrozenModel
    val_accuracy: float
    epochs_ran: int
    converged: bool


def _forward_cached(x, weights):
    w1, b1, w2, b2, fw, fb = weights
    pre1, win1 = _conv_forward(x, w1, b1, want_windows=True)
    a1 = np.maximum(pre1, 0.0)
    pre2, win2 = _conv_forward(a1, w2, b2, want_windows=True)
    a2 = np.maximum(pre2, 0.0)
    feats = a2.mean(axis=(2, 3))
    logits = feats @ fw.T + fb
    return logits, (pre1, win1, pre2, win2, feats)


def _weight_grads(x, weights, cache, grad_logits):
    w1, b1, w2, b2, fw, fb = weights
    pre1, win1, pre2, win2, feats = cache
    g = grad_logits
    gfw = g.T @ feats
    gfb = g.sum(axis=0)
    dfeats = g @ fw
    h2, w2s = pre2.shape[2:]
    da2 = np.broadcast_to(dfeats[:, :, None, None] / (h2 * w2s), pre2.shape) * (
        pre2 > 0
    )
    # weight grad: correlate the upstream gradient with the cached patches
    dyt2 = da2.transpose(0, 2, 3, 1)
    gw2 = np.einsum("nhwo,nhwckl->ockl", dyt2, win2)
    gb2 = da2.sum(axis=(0, 2, 3))
    da1 = _conv_input_grad(da2, w2, pre1.shape) * (pre1 > 0)
    dyt1 = da1.transpose(0, 2, 3, 1)
    gw1 = np.einsum("nhwo,nhwckl->ockl", dyt1, win1)
    gb1 = da1.sum(axis=(0, 2, 3))
    return gw1, gb1, gw2, gb2, gfw, gfb


def pretrain_source(data, cfg: PretrainConfig, rng: RngStream) -> PretrainResult:
    """Train the stand-in classifier on source-domain data, then freeze it.

    `data` needs .train_x/.train_y/.val_x/.val_y arrays.  Stops as soon as a
    post-epoch validation pass reaches the target accuracy; if the budget
    runs out first, the achieved weights are still returned and a warning
    records the shortfall.
    """
    # bind the splits once: dataset accessors may hand out fresh copies
    train_x = np.asarray(data.train_x)
    train_y = np.asarray(data.train_y)
    val_x = np.asarray(data.val_x)
    val_y = np.asarray(data.val_y)
    num_classes = int(train_y.max()) + 1
    init = init_model(num_classes, rng.child("init"))
    weights = [a.copy().astype(np.float32) for a in init.weight_arrays()]
    vel = [np.zeros_like(a) for a in weights]
    n = train_x.shape[0]
    val_acc = _accuracy_on(weights, val_x, val_y)
    epochs_ran = 0
    for epoch in range(cfg.max_epochs):
        if val_acc >= cfg.target_val_acc:
            break
        order = rng.child(f"shuffle/{epoch}").generator().permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = train_x[idx].astype(np.float32)
            yb = train_y[idx]
            logits, cache = _forward_cached(xb, weights)
            _, glogits = cross_entropy(logits, yb)
            grads = _weight_grads(xb, weights, cache, glogits.astype(np.float32))
            for i, g in enumerate(grads):
                g = g + cfg.weight_decay * weights[i]
                vel[i] = cfg.momentum * vel[i] + g
                weights[i] = weights[i] - cfg.lr * vel[i]
        epochs_ran = epoch + 1
        val_acc = _accuracy_on(weights, val_x, val_y)
    converged = val_acc >= cfg.target_val_acc
    if not converged:
        warnings.warn(
            f"source pretraining stopped at val accuracy {val_acc:.3f} "
            f"after {epochs_ran} epochs (target {cfg.target_val_acc})",
            stacklevel=2,
        )
    model = FrozenModel(
        conv1_w=weights[0],
        conv1_b=weights[1],
        conv2_w=weights[2],
        conv2_b=weights[3],
        fc_w=weights[4],
        fc_b=weights[5],
        num_classes=num_classes,
    )
    return PretrainResult(model, float(val_acc), epochs_ran, converged)


def _accuracy_on(weights, x, y) -> float:
    logits, _ = _forward_cached(np.asarray(x, dtype=np.float32), weights)
    return float((logits.argmax(axis=1) == y).mean())
