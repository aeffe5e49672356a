import numpy as np
import pytest

from dlcompress import models, nn
from dlcompress.data import Dataset, FixtureSpec, make_fixture_dataset
from dlcompress.errors import TrainingDiverged
from dlcompress.nn import F32
from dlcompress.train import TrainConfig, evaluate, fine_tune, grad, loss

from util import random_small_net


def finite_difference_grads(model, batch, labels, h=1e-3):
    """Central differences on float32-representable parameter perturbations."""
    fd = {}
    for key, arr in model.parameters().items():
        g = np.zeros(arr.shape)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            hi = np.float32(np.float64(orig) + h)
            lo = np.float32(np.float64(orig) - h)
            flat[i] = hi
            up = loss(model, batch, labels)
            flat[i] = lo
            down = loss(model, batch, labels)
            flat[i] = orig
            gflat[i] = (up - down) / (np.float64(hi) - np.float64(lo))
        fd[key] = g
    return fd


def relative_mismatch(analytic, fd):
    a = np.concatenate([analytic[k].ravel() for k in sorted(analytic)])
    f = np.concatenate([fd[k].ravel() for k in sorted(analytic)])
    scale = np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-6)
    return np.abs(a - f) / scale


class TestGrad:
    def test_saturated_softmax_has_zero_grads(self):
        w = np.array([[40.0, 0.0], [0.0, 40.0]], dtype=F32)
        m = nn.Model([nn.Dense(0, w)], (2,), 2)
        x = np.eye(2, dtype=F32)
        g = grad(m, x, np.array([0, 1]))
        norm = np.sqrt(sum(float((v ** 2).sum()) for v in g.values()))
        assert norm < 1e-6

    def test_single_dense_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        m = nn.Model([models.dense(0, rng, 2, 2)], (2,), 2)
        x = rng.normal(size=(1, 2)).astype(F32)
        y = np.array([1])
        rel = relative_mismatch(grad(m, x, y), finite_difference_grads(m, x, y))
        assert rel.max() < 1e-3

    def test_loss_scale_linearity(self):
        rng = np.random.default_rng(1)
        m = models.fixture_cnn(seed=1, width=4)
        x = rng.normal(size=(2, 1, 10, 10)).astype(F32)
        y = np.array([0, 2])
        g1 = grad(m, x, y, loss_scale=1.0)
        g2 = grad(m, x, y, loss_scale=2.0)
        for k in g1:
            np.testing.assert_allclose(g2[k], 2.0 * g1[k], rtol=1e-12)

    def test_random_tiny_nets_against_fd_oracle(self):
        rng = np.random.default_rng(123)
        for i in range(6):
            m = random_small_net(rng, with_residual=(i % 3 == 0))
            x = rng.normal(size=(2,) + m.input_shape).astype(F32)
            y = rng.integers(0, m.class_count, size=2)
            rel = relative_mismatch(grad(m, x, y), finite_difference_grads(m, x, y))
            frac_ok = float((rel < 1e-3).mean())
            assert frac_ok >= 0.99, f"net {i}: only {frac_ok:.3f} of coords match"


class TestFineTune:
    def test_zero_epochs_identity(self):
        m = models.fixture_cnn(seed=2)
        ds = make_fixture_dataset(FixtureSpec(images_per_class=4, seed=2))
        out, losses = fine_tune(m, ds, TrainConfig(epochs=0))
        assert out.param_bytes() == m.param_bytes()
        assert losses == []

    def test_zero_lr_identity(self):
        m = models.fixture_cnn(seed=3)
        ds = make_fixture_dataset(FixtureSpec(images_per_class=4, seed=3))
        out, _ = fine_tune(m, ds, TrainConfig(epochs=3, lr_start=0.0, lr_end=0.0))
        assert out.param_bytes() == m.param_bytes()

    def test_overfits_small_fixture(self):
        ds = make_fixture_dataset(FixtureSpec(class_count=4, images_per_class=4, seed=5))
        m = models.fixture_cnn(seed=5)
        cfg = TrainConfig(epochs=200, lr_start=0.05, lr_end=0.005, batch_size=8, seed=5)
        out, losses = fine_tune(m, ds, cfg)
        assert evaluate(out, ds).accuracy == 1.0
        assert losses[-1] < losses[0]

    def test_lr_schedule_geometric(self):
        cfg = TrainConfig(epochs=30, lr_start=0.01, lr_end=0.001)
        assert cfg.lr_at(0) == 0.01
        np.testing.assert_allclose(cfg.lr_at(29), 0.001, rtol=1e-12)
        mids = [cfg.lr_at(e) for e in range(30)]
        ratios = np.diff(np.log(mids))
        np.testing.assert_allclose(ratios, ratios[0], rtol=1e-9)

    def test_divergence_raises_with_best_checkpoint(self):
        ds = make_fixture_dataset(FixtureSpec(images_per_class=4, seed=7))
        m = models.fixture_cnn(seed=7)
        cfg = TrainConfig(epochs=50, lr_start=1e6, lr_end=1e6, batch_size=8)
        with pytest.raises(TrainingDiverged) as exc:
            fine_tune(m, ds, cfg)
        assert exc.value.best_model is not None

    def test_mask_projection_keeps_exact_zeros(self):
        ds = make_fixture_dataset(FixtureSpec(images_per_class=8, seed=9))
        m = models.fixture_cnn(seed=9)
        w = m.layer(4).weight
        keep = np.ones(w.shape, dtype=bool)
        keep[3:7] = False
        w[~keep] = 0.0
        masks = {(4, "weight"): keep}
        out, _ = fine_tune(m, ds, TrainConfig(epochs=5, batch_size=16), masks=masks)
        assert np.all(out.layer(4).weight[~keep] == 0.0)
        # and the kept entries actually trained
        assert not np.array_equal(out.layer(4).weight[keep], m.layer(4).weight[keep])


class TestEvaluate:
    def test_constant_predictor_balanced(self):
        w = np.zeros((2, 4), dtype=F32)
        b = np.array([1.0, 0.0], dtype=F32)
        m = nn.Model([nn.Dense(0, w, b)], (4,), 2)
        images = np.random.default_rng(0).normal(size=(10, 4)).astype(F32)
        labels = np.array([0] * 5 + [1] * 5)
        res = evaluate(m, Dataset(images, labels, 2))
        assert res.accuracy == 0.5
        np.testing.assert_array_equal(res.per_class_accuracy, [1.0, 0.0])

    def test_absent_class_is_nan(self):
        w = np.zeros((3, 4), dtype=F32)
        b = np.array([1.0, 0.0, 0.0], dtype=F32)
        m = nn.Model([nn.Dense(0, w, b)], (4,), 3)
        images = np.zeros((4, 4), dtype=F32)
        labels = np.array([0, 0, 1, 1])
        res = evaluate(m, Dataset(images, labels, 3))
        assert np.isnan(res.per_class_accuracy[2])

    def test_accuracy_invariant_under_shuffle(self):
        ds = make_fixture_dataset(FixtureSpec(images_per_class=8, seed=4))
        m = models.fixture_cnn(seed=4)
        perm = np.random.default_rng(1).permutation(len(ds))
        a = evaluate(m, ds).accuracy
        b = evaluate(m, ds.subset(perm)).accuracy
        assert a == b
