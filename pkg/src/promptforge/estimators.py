"""Scikit-learn facade: a classifier whose only trainable part is the prompt.

PromptedClassifier keeps the wrapped network frozen and fits an input-space
prompt with the package trainer, so it composes with sklearn tooling
(clone, get_params grids, cross-validation) while every number still comes
from the deterministic numpy pipeline underneath.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import Dataset, split
from .errors import ClassMismatch, ConfigError, EmptySplit, ShapeMismatch
from .model import FrozenModel, PretrainConfig, model_forward, pretrain_source
from .numerics import softmax
from .pipeline import (
    DEFAULT_EVP_SCALE,
    BaselineConfig,
    PromptParams,
    prepare_baseline,
    prepare_prompt,
)
from .rng import RngStream
from .train import TrainConfig, train_prompt

__all__ = ["PromptedClassifier"]

_PREDICT_BATCH = 256


class PromptedClassifier(TransformerMixin, ClassifierMixin, BaseEstimator):
    """Adapt a frozen classifier to new data by learning an input prompt.

    Labels must be head indices: integers in [0, model.num_classes).  When
    no model is given, fit() first pretrains the built-in small network on
    the same data (its validation split doubles as the prompt's), then
    freezes it and trains the prompt against it.

    transform() returns the prompted images, so the fitted object also
    works as a preprocessing step.
    """

    def __init__(
        self,
        model: FrozenModel | None = None,
        variant: str = "acavp",
        lr0: float = 40.0,
        epochs: int = 200,
        momentum: float = 0.9,
        batch_size: int = 64,
        clip_value: float = 0.001,
        grad_normalize: bool = True,
        weight_decay: float = 0.0,
        mse_reg_weight: float = 0.0,
        augment: str = "none",
        val_fraction: float = 0.1,
        pad: int | None = 28,
        scale: float = DEFAULT_EVP_SCALE,
        mask_mode: str = "geometric",
        workers: int = 1,
        seed: int = 0,
    ):
        self.model = model
        self.variant = variant
        self.lr0 = lr0
        self.epochs = epochs
        self.momentum = momentum
        self.batch_size = batch_size
        self.clip_value = clip_value
        self.grad_normalize = grad_normalize
        self.weight_decay = weight_decay
        self.mse_reg_weight = mse_reg_weight
        self.augment = augment
        self.val_fraction = val_fraction
        self.pad = pad
        self.scale = scale
        self.mask_mode = mask_mode
        self.workers = workers
        self.seed = seed

    def _check_images(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X)
        if X.ndim != 4 or X.shape[1] != 3:
            raise ShapeMismatch(f"X must be (N, 3, H, W) images, got {X.shape}")
        return X

    def fit(self, X, y) -> "PromptedClassifier":
        X = self._check_images(X)
        y = np.asarray(y)
        if X.shape[0] == 0:
            raise EmptySplit("cannot fit on an empty dataset")
        if not (0.0 < self.val_fraction < 1.0):
            raise ConfigError(
                f"val_fraction must lie in (0, 1), got {self.val_fraction}"
            )
        if not np.issubdtype(y.dtype, np.integer):
            raise ClassMismatch(f"labels must be integer head indices, got {y.dtype}")
        num_classes = int(y.max()) + 1
        root = RngStream(self.seed).child("estimator")
        d = Dataset(images=X, labels=y, num_classes=num_classes)
        d = split(d, (1.0 - self.val_fraction, self.val_fraction, 0.0), root.child("split"))
        model = self.model
        if model is None:
            model = pretrain_source(d, PretrainConfig(), root.child("pretrain")).model
        elif num_classes > model.num_classes:
            raise ClassMismatch(
                f"labels reach {num_classes - 1} but the model has "
                f"{model.num_classes} classes"
            )
        cfg = TrainConfig(
            lr0=self.lr0,
            epochs=self.epochs,
            momentum=self.momentum,
            batch_size=self.batch_size,
            clip_value=self.clip_value,
            grad_normalize=self.grad_normalize,
            weight_decay=self.weight_decay,
            mse_reg_weight=self.mse_reg_weight,
            augment=self.augment,
            seed=self.seed,
        )
        res = train_prompt(
            cfg,
            model,
            d,
            self.variant,
            workers=self.workers,
            pad=self.pad,
            scale=self.scale,
            mask_mode=self.mask_mode,
        )
        self.model_ = model
        self.result_ = res
        self.prompt_ = res.params
        self.metrics_ = res.metrics
        self.best_epoch_ = res.best_epoch
        self.val_accuracy_ = res.best_val_accuracy
        self.classes_ = np.arange(model.num_classes)
        self.height_ = X.shape[2]
        self.width_ = X.shape[3]
        if isinstance(res.params, PromptParams):
            self._prep = prepare_prompt(res.params, self.mask_mode)
        else:
            self._prep = prepare_baseline(res.params)
        return self

    def _logits(self, X: np.ndarray) -> np.ndarray:
        check_is_fitted(self)
        X = self._check_images(X)
        outs = []
        for s in range(0, X.shape[0], _PREDICT_BATCH):
            prompted = self._prep.apply(X[s : s + _PREDICT_BATCH])
            outs.append(model_forward(prompted, self.model_)[0])
        return np.concatenate(outs, axis=0)

    def predict(self, X) -> np.ndarray:
        return self._logits(X).argmax(axis=1)

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self._logits(X))

    def transform(self, X) -> np.ndarray:
        """The prompted images the frozen model actually sees."""
        check_is_fitted(self)
        X = self._check_images(X)
        outs = []
        for s in range(0, X.shape[0], _PREDICT_BATCH):
            outs.append(self._prep.apply(X[s : s + _PREDICT_BATCH]))
        return np.concatenate(outs, axis=0)
