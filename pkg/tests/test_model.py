import numpy as np
import pytest

from promptforge.errors import ShapeMismatch, TapeMismatch, TensorFileError
from promptforge.model import (
    FrozenModel,
    PretrainConfig,
    checksum_model,
    cross_entropy,
    dropout_feature,
    head_forward,
    init_model,
    load_model,
    model_forward,
    model_input_grad,
    model_to_tensors,
    pretrain_source,
    save_model,
)
from promptforge.numerics import softmax
from promptforge.rng import RngStream

from oracles import FD_STEP, cross_entropy_oracle, rel_err


def tiny_model(seed=0, k=4):
    return init_model(k, RngStream(seed).child("w"))


def zero_model(k=3):
    return FrozenModel(
        conv1_w=np.zeros((8, 3, 3, 3), dtype=np.float32),
        conv1_b=np.zeros(8, dtype=np.float32),
        conv2_w=np.zeros((16, 8, 3, 3), dtype=np.float32),
        conv2_b=np.zeros(16, dtype=np.float32),
        fc_w=np.zeros((k, 16), dtype=np.float32),
        fc_b=np.zeros(k, dtype=np.float32),
        num_classes=k,
    )


class TestForward:
    def test_zero_weights_uniform(self):
        m = zero_model()
        x = np.random.default_rng(0).random((3, 16, 16)).astype(np.float32)
        logits, _ = model_forward(x, m)
        assert logits.shape == (3,)
        np.testing.assert_array_equal(logits, np.zeros(3, dtype=logits.dtype))
        np.testing.assert_allclose(softmax(logits), 1 / 3, atol=1e-7)

    def test_deterministic(self):
        m = tiny_model(1)
        x = np.random.default_rng(1).random((3, 16, 16)).astype(np.float32)
        a, _ = model_forward(x, m)
        b, _ = model_forward(x, m)
        np.testing.assert_array_equal(a, b)

    def test_softmax_normalized(self):
        m = tiny_model(2)
        x = np.random.default_rng(2).random((5, 3, 16, 16)).astype(np.float32)
        logits, _ = model_forward(x, m)
        assert logits.shape == (5, 4)
        np.testing.assert_allclose(softmax(logits).sum(axis=1), 1.0, atol=1e-6)

    def test_scaled_head_keeps_argmax(self):
        m = tiny_model(3)
        scaled = FrozenModel(
            conv1_w=m.conv1_w,
            conv1_b=m.conv1_b,
            conv2_w=m.conv2_w,
            conv2_b=m.conv2_b,
            fc_w=m.fc_w * 7.5,
            fc_b=m.fc_b * 7.5,
            num_classes=m.num_classes,
        )
        x = np.random.default_rng(3).random((6, 3, 16, 16)).astype(np.float32)
        a, _ = model_forward(x, m)
        b, _ = model_forward(x, scaled)
        np.testing.assert_array_equal(a.argmax(axis=1), b.argmax(axis=1))

    def test_single_matches_batch_row(self):
        m = tiny_model(4)
        x = np.random.default_rng(4).random((2, 3, 16, 16)).astype(np.float32)
        batch, _ = model_forward(x, m)
        one, _ = model_forward(x[0], m)
        np.testing.assert_array_equal(one, batch[0])

    def test_too_small_input(self):
        with pytest.raises(ShapeMismatch):
            model_forward(np.zeros((3, 4, 4), dtype=np.float32), tiny_model())

    def test_wrong_channels(self):
        with pytest.raises(ShapeMismatch):
            model_forward(np.zeros((1, 16, 16), dtype=np.float32), tiny_model())

    def test_weights_are_immutable(self):
        m = tiny_model(5)
        with pytest.raises(ValueError):
            m.conv1_w[0, 0, 0, 0] = 1.0


class TestInputGrad:
    def test_zero_grad_logits(self):
        m = tiny_model(6)
        x = np.random.default_rng(6).random((3, 16, 16))
        _, tape = model_forward(x, m)
        gx = model_input_grad(tape, np.zeros(4), m)
        assert gx.shape == x.shape
        assert np.all(gx == 0.0)

    def test_dead_relu_blocks_everything(self):
        m = tiny_model(7)
        dead = FrozenModel(
            conv1_w=m.conv1_w,
            conv1_b=np.full(8, -100.0, dtype=np.float32),
            conv2_w=m.conv2_w,
            conv2_b=m.conv2_b,
            fc_w=m.fc_w,
            fc_b=m.fc_b,
            num_classes=m.num_classes,
        )
        x = np.random.default_rng(7).random((3, 16, 16))
        logits, tape = model_forward(x, dead)
        gx = model_input_grad(tape, np.ones(4), dead)
        assert np.all(gx == 0.0)

    # seeds verified to keep every ReLU pre-activation clear of the +-1e-3
    # finite-difference bracket; unverified seeds can straddle a kink
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_fd_input_grad(self, seed):
        rng = np.random.default_rng(400 + seed)
        m = init_model(4, RngStream(400 + seed).child("w"))
        x = rng.random((3, 16, 16))
        label = int(rng.integers(0, 4))
        logits, tape = model_forward(x, m)
        _, glog = cross_entropy(logits, label)
        gx = model_input_grad(tape, glog, m)
        picks = rng.choice(x.size, 60, replace=False)
        for i in picks:
            xp = x.copy()
            xp.reshape(-1)[i] += FD_STEP
            hi = cross_entropy(model_forward(xp, m)[0], label)[0]
            xp.reshape(-1)[i] -= 2 * FD_STEP
            lo = cross_entropy(model_forward(xp, m)[0], label)[0]
            fd = (hi - lo) / (2 * FD_STEP)
            assert rel_err(float(gx.reshape(-1)[i]), fd) <= 1e-3

    def test_batch_grad_rows_match_singles(self):
        m = tiny_model(8)
        x = np.random.default_rng(8).random((3, 3, 16, 16))
        logits, tape = model_forward(x, m)
        g = np.random.default_rng(9).random((3, 4))
        gx = model_input_grad(tape, g, m)
        for i in range(3):
            _, t1 = model_forward(x[i], m)
            gx1 = model_input_grad(t1, g[i], m)
            np.testing.assert_allclose(gx[i], gx1, rtol=1e-12)

    def test_tape_mismatch(self):
        m = tiny_model(10)
        x = np.random.default_rng(10).random((2, 3, 16, 16))
        _, tape = model_forward(x, m)
        with pytest.raises(TapeMismatch):
            model_input_grad(tape, np.zeros((3, 4)), m)


class TestDropout:
    def test_rate_zero_identity(self):
        f = np.random.default_rng(11).random((4, 16))
        out, mask = dropout_feature(f, 0.0, RngStream(0), training=True)
        np.testing.assert_array_equal(out, f)
        np.testing.assert_array_equal(mask, np.ones_like(f))

    def test_eval_identity(self):
        f = np.random.default_rng(12).random((4, 16))
        out, _ = dropout_feature(f, 0.9, RngStream(0), training=False)
        np.testing.assert_array_equal(out, f)

    def test_kept_fraction(self):
        f = np.ones((1, 100000))
        out, mask = dropout_feature(f, 0.5, RngStream(5).child("drop"), training=True)
        kept = float((mask > 0).mean())
        assert 0.49 <= kept <= 0.51
        np.testing.assert_allclose(out[mask > 0], 2.0, rtol=1e-12)

    def test_deterministic(self):
        f = np.random.default_rng(13).random((4, 16))
        s = RngStream(7).child("drop")
        a, _ = dropout_feature(f, 0.3, s, training=True)
        b, _ = dropout_feature(f, 0.3, s, training=True)
        np.testing.assert_array_equal(a, b)

    def test_mask_gates_input_grad(self):
        m = tiny_model(14)
        x = np.random.default_rng(14).random((2, 3, 16, 16))
        _, tape = model_forward(x, m)
        g = np.random.default_rng(15).random((2, 4))
        gx_open = model_input_grad(tape, g, m, feature_mask=np.ones((2, 16)))
        gx_shut = model_input_grad(tape, g, m, feature_mask=np.zeros((2, 16)))
        np.testing.assert_allclose(
            gx_open, model_input_grad(tape, g, m), rtol=1e-12
        )
        assert np.all(gx_shut == 0.0)

    def test_bad_rate(self):
        with pytest.raises(ValueError):
            dropout_feature(np.ones((1, 4)), 1.0, RngStream(0), training=True)


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss, grad = cross_entropy(np.zeros((2, 5)), np.array([0, 3]))
        assert abs(loss - np.log(5)) < 1e-12
        np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-12)

    def test_matches_oracle(self):
        rng = np.random.default_rng(16)
        logits = rng.normal(0, 3, (6, 4))
        labels = rng.integers(0, 4, 6)
        loss, _ = cross_entropy(logits, labels)
        ref = np.mean([cross_entropy_oracle(logits[i], labels[i]) for i in range(6)])
        assert abs(loss - ref) < 1e-10

    def test_grad_matches_fd(self):
        rng = np.random.default_rng(17)
        logits = rng.normal(0, 2, (3, 4))
        labels = rng.integers(0, 4, 3)
        _, grad = cross_entropy(logits, labels)
        for i in range(3):
            for j in range(4):
                lp = logits.copy()
                lp[i, j] += FD_STEP
                hi = cross_entropy(lp, labels)[0]
                lp[i, j] -= 2 * FD_STEP
                lo = cross_entropy(lp, labels)[0]
                fd = (hi - lo) / (2 * FD_STEP)
                assert rel_err(float(grad[i, j]), fd) <= 1e-3

    def test_single_sample(self):
        loss, grad = cross_entropy(np.array([1.0, 2.0, 3.0]), 2)
        assert grad.shape == (3,)
        assert loss > 0

    def test_bad_label(self):
        with pytest.raises(ShapeMismatch):
            cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


class TestPersistence:
    def test_round_trip(self, tmp_path):
        m = tiny_model(18)
        p = tmp_path / "model.bin"
        save_model(p, m)
        q = load_model(p)
        assert q.num_classes == m.num_classes
        for a, b in zip(m.weight_arrays(), q.weight_arrays()):
            np.testing.assert_array_equal(a, b)
        assert checksum_model(q) == checksum_model(m)

    def test_entry_names(self):
        t = model_to_tensors(tiny_model(19))
        assert list(t) == [
            "conv1.w",
            "conv1.b",
            "conv2.w",
            "conv2.b",
            "fc.w",
            "fc.b",
            "meta.num_classes",
        ]

    def test_missing_entry(self, tmp_path):
        from promptforge.tensorfile import save_tensors

        t = model_to_tensors(tiny_model(20))
        del t["fc.b"]
        p = tmp_path / "broken.bin"
        save_tensors(p, t)
        with pytest.raises(TensorFileError):
            load_model(p)

    def test_checksum_sensitive(self):
        a = tiny_model(21)
        b = tiny_model(22)
        assert checksum_model(a) != checksum_model(b)


class SepData:
    """Two linearly separable brightness classes."""

    def __init__(self, seed=0, n=240, n_val=60):
        rng = np.random.default_rng(seed)
        y = rng.integers(0, 2, n + n_val)
        base = np.where(y[:, None, None, None] == 0, 0.25, 0.75)
        x = base + rng.normal(0, 0.05, (n + n_val, 3, 16, 16))
        x = np.clip(x, 0, 1).astype(np.float32)
        self.train_x, self.train_y = x[:n], y[:n]
        self.val_x, self.val_y = x[n:], y[n:]


class TestPretrain:
    def test_learns_separable_task(self):
        data = SepData(23)
        cfg = PretrainConfig(max_epochs=20, target_val_acc=0.95)
        res = pretrain_source(data, cfg, RngStream(23))
        assert res.val_accuracy >= 0.95
        assert res.converged

    def test_zero_budget_returns_init(self):
        data = SepData(24)
        cfg = PretrainConfig(max_epochs=0)
        with pytest.warns(UserWarning):
            res = pretrain_source(data, cfg, RngStream(24))
        assert res.epochs_ran == 0
        assert not res.converged
        ref = init_model(2, RngStream(24).child("init"))
        for a, b in zip(res.model.weight_arrays(), ref.weight_arrays()):
            np.testing.assert_array_equal(a, b)

    def test_same_seed_same_bytes(self, tmp_path):
        cfg = PretrainConfig(max_epochs=3, target_val_acc=2.0)  # unreachable
        pa = tmp_path / "a.bin"
        pb = tmp_path / "b.bin"
        with pytest.warns(UserWarning):
            save_model(pa, pretrain_source(SepData(25), cfg, RngStream(25)).model)
        with pytest.warns(UserWarning):
            save_model(pb, pretrain_source(SepData(25), cfg, RngStream(25)).model)
        assert pa.read_bytes() == pb.read_bytes()

    def test_head_forward_consistency(self):
        m = tiny_model(26)
        x = np.random.default_rng(26).random((2, 3, 16, 16)).astype(np.float32)
        logits, tape = model_forward(x, m)
        np.testing.assert_allclose(head_forward(tape.feats, m), logits, rtol=1e-6)
