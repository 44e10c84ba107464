"""The sklearn-style classifier wrapper."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from promptforge.data import gen_shapes
from promptforge.errors import (
    ClassMismatch,
    ConfigError,
    EmptySplit,
    ShapeMismatch,
)
from promptforge.estimators import PromptedClassifier
from promptforge.model import checksum_model, init_model, model_forward
from promptforge.pipeline import BaselineConfig, PromptParams
from promptforge.rng import RngStream

HW = 16
K = 3


def brightness_task(n=240, seed=0):
    """Two classes separated by mean brightness; trivially learnable."""
    gen = RngStream(seed).child("bright").generator()
    y = (np.arange(n) % 2).astype(np.int64)
    base = np.where(y == 0, 0.25, 0.75).astype(np.float32)
    x = base[:, None, None, None] + gen.normal(0.0, 0.05, (n, 3, HW, HW)).astype(
        np.float32
    )
    return np.clip(x, 0.0, 1.0), y


@pytest.fixture(scope="module")
def shapes():
    d = gen_shapes(240, HW, HW, K, RngStream(3).child("est-data"))
    return d.images, d.labels


@pytest.fixture(scope="module")
def model():
    return init_model(K, RngStream(5).child("est-model"))


@pytest.fixture(scope="module")
def fitted(shapes, model):
    X, y = shapes
    return PromptedClassifier(model=model, epochs=2, seed=1).fit(X, y)


class TestFit:
    def test_sets_fitted_attributes(self, fitted, model):
        assert fitted.model_ is model
        assert isinstance(fitted.prompt_, PromptParams)
        assert np.array_equal(fitted.classes_, np.arange(K))
        assert fitted.height_ == HW and fitted.width_ == HW
        assert 0.0 <= fitted.val_accuracy_ <= 1.0
        assert fitted.best_epoch_ <= 2

    def test_model_stays_frozen(self, shapes, model):
        X, y = shapes
        before = checksum_model(model)
        PromptedClassifier(model=model, epochs=1, seed=0).fit(X, y)
        assert checksum_model(model) == before

    def test_pretrains_when_no_model_given(self):
        X, y = brightness_task()
        clf = PromptedClassifier(epochs=1, seed=4).fit(X, y)
        assert clf.model_.num_classes == 2
        assert clf.score(X, y) > 0.9

    @pytest.mark.parametrize("variant", ["vp", "evp", "autovp"])
    def test_baseline_variants(self, shapes, model, variant):
        X, y = shapes
        clf = PromptedClassifier(
            model=model, variant=variant, epochs=1, pad=4, seed=2
        ).fit(X, y)
        assert isinstance(clf.prompt_, BaselineConfig)
        assert clf.prompt_.variant == variant

    def test_deterministic_across_refits(self, shapes, model):
        X, y = shapes
        a = PromptedClassifier(model=model, epochs=2, seed=7).fit(X, y)
        b = PromptedClassifier(model=model, epochs=2, seed=7).fit(X, y)
        assert a.metrics_.to_csv() == b.metrics_.to_csv()
        assert np.array_equal(a.predict(X), b.predict(X))

    def test_clone_refits_identically(self, shapes, model, fitted):
        X, y = shapes
        again = clone(fitted).fit(X, y)
        assert again.metrics_.to_csv() == fitted.metrics_.to_csv()


class TestPredict:
    def test_predict_shape_and_range(self, fitted, shapes):
        X, y = shapes
        pred = fitted.predict(X)
        assert pred.shape == y.shape
        assert set(np.unique(pred)) <= set(range(K))

    def test_score_is_accuracy(self, fitted, shapes):
        X, y = shapes
        assert fitted.score(X, y) == float((fitted.predict(X) == y).mean())

    def test_proba_rows_normalized(self, fitted, shapes):
        X, _ = shapes
        proba = fitted.predict_proba(X[:32])
        assert proba.shape == (32, K)
        assert np.allclose(proba.sum(axis=1), 1.0, atol=1e-6)
        assert np.array_equal(proba.argmax(axis=1), fitted.predict(X[:32]))

    def test_predict_agrees_with_transform(self, fitted, shapes):
        X, _ = shapes
        prompted = fitted.transform(X[:20])
        assert prompted.shape == (20, 3, HW, HW)
        logits, _ = model_forward(prompted, fitted.model_)
        assert np.array_equal(logits.argmax(axis=1), fitted.predict(X[:20]))


class TestErrors:
    def test_unfitted_predict(self, shapes):
        X, _ = shapes
        with pytest.raises(NotFittedError):
            PromptedClassifier().predict(X)

    def test_bad_shapes(self, model):
        clf = PromptedClassifier(model=model, epochs=1)
        with pytest.raises(ShapeMismatch):
            clf.fit(np.zeros((10, 1, HW, HW), dtype=np.float32), np.zeros(10, dtype=np.int64))
        with pytest.raises(EmptySplit):
            clf.fit(np.zeros((0, 3, HW, HW), dtype=np.float32), np.zeros(0, dtype=np.int64))

    def test_bad_labels(self, shapes, model):
        X, y = shapes
        with pytest.raises(ClassMismatch):
            PromptedClassifier(model=model, epochs=1).fit(X, y.astype(np.float64))
        small = init_model(2, RngStream(9).child("small"))
        with pytest.raises(ClassMismatch):
            PromptedClassifier(model=small, epochs=1).fit(X, y)

    def test_bad_val_fraction(self, shapes, model):
        X, y = shapes
        for vf in (0.0, 1.0, -0.2):
            with pytest.raises(ConfigError):
                PromptedClassifier(model=model, epochs=1, val_fraction=vf).fit(X, y)
