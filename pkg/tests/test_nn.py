import numpy as np
import pytest

from dlcompress import nn, models
from dlcompress.errors import CorruptModel, FormatError, InvalidShape, UnsupportedVersion
from dlcompress.nn import F32
from dlcompress.serialize import load_model, save_model

from util import conv2d_bruteforce, random_small_net


def single_layer_model(layer, input_shape, class_count):
    return nn.Model([layer], input_shape, class_count)


class TestForward:
    def test_dense_identity(self):
        layer = nn.Dense(0, np.eye(3, dtype=F32), np.zeros(3, dtype=F32))
        m = single_layer_model(layer, (3,), 3)
        out = nn.forward(m, np.array([[1.0, 2.0, 3.0]], dtype=F32))
        np.testing.assert_array_equal(out, [[1.0, 2.0, 3.0]])

    def test_conv_all_ones_kernel(self):
        conv = nn.Conv2d(0, np.ones((1, 1, 3, 3), dtype=F32), None, stride=1, pad=0)
        m = nn.Model([conv, nn.Flatten(1)], (1, 5, 5), 9)
        out = nn.forward(m, np.ones((1, 1, 5, 5), dtype=F32))
        np.testing.assert_array_equal(out.reshape(3, 3), np.full((3, 3), 9.0))

    def test_relu(self):
        m = single_layer_model(nn.ReLU(0), (3,), 3)
        out = nn.forward(m, np.array([[-1.0, 0.0, 2.0]], dtype=F32))
        np.testing.assert_array_equal(out, [[0.0, 0.0, 2.0]])

    def test_deterministic_bits(self):
        m = models.fixture_cnn(seed=3)
        x = np.random.default_rng(0).normal(size=(4, 1, 10, 10)).astype(F32)
        a = nn.forward(m, x)
        b = nn.forward(m, x)
        assert a.tobytes() == b.tobytes()

    def test_batch_shape_mismatch(self):
        m = models.fixture_cnn()
        with pytest.raises(InvalidShape):
            nn.forward(m, np.zeros((2, 1, 9, 9), dtype=F32))

    def test_nan_params_rejected(self):
        m = models.fixture_cnn()
        m.layer(0).weight[0, 0, 0, 0] = np.nan
        with pytest.raises(CorruptModel):
            nn.forward(m, np.zeros((1, 1, 10, 10), dtype=F32))

    def test_residual_add_is_elementwise_sum(self):
        m = models.residual_cnn(seed=1)
        x = np.random.default_rng(1).normal(size=(2, 2, 8, 8)).astype(F32)
        _, rec = nn.forward_recorded(m, x)
        expected = (rec.post[1].astype(np.float64) + rec.post[2].astype(np.float64)).astype(F32)
        np.testing.assert_array_equal(rec.post[3], expected)

    def test_maxpool_and_avgpool_values(self):
        x = np.arange(16, dtype=F32).reshape(1, 1, 4, 4)
        mp = nn.Model([nn.MaxPool(0, kh=2, kw=2, stride=2), nn.Flatten(1)], (1, 4, 4), 4)
        np.testing.assert_array_equal(
            nn.forward(mp, x).reshape(2, 2), [[5, 7], [13, 15]])
        ap = nn.Model([nn.AvgPool(0, kh=2, kw=2, stride=2), nn.Flatten(1)], (1, 4, 4), 4)
        np.testing.assert_array_equal(
            nn.forward(ap, x).reshape(2, 2), [[2.5, 4.5], [10.5, 12.5]])


class TestConvAgainstBruteForce:
    def test_random_shapes(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            n = int(rng.integers(1, 3))
            in_c, out_c = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            h = int(rng.integers(3, 9))
            w = int(rng.integers(3, 9))
            kh = int(rng.integers(1, min(4, h) + 1))
            kw = int(rng.integers(1, min(4, w) + 1))
            stride = int(rng.integers(1, 3))
            pad = int(rng.integers(0, 2))
            if (h + 2 * pad - kh) < 0 or (w + 2 * pad - kw) < 0:
                continue
            weight = rng.normal(size=(out_c, in_c, kh, kw)).astype(F32)
            bias = rng.normal(size=out_c).astype(F32)
            x = rng.normal(size=(n, in_c, h, w)).astype(F32)
            conv = nn.Conv2d(0, weight, bias, stride=stride, pad=pad)
            got = nn._apply_layer(conv, x.astype(np.float64), None)
            want, _ = conv2d_bruteforce(x, weight.astype(np.float64),
                                        bias.astype(np.float64), stride, pad)
            oh = (h + 2 * pad - kh) // stride + 1
            ow = (w + 2 * pad - kw) // stride + 1
            assert got.shape == (n, out_c, oh, ow)
            np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-10)


class TestForwardRecorded:
    def test_single_relu_record(self):
        m = single_layer_model(nn.ReLU(0), (2,), 2)
        _, rec = nn.forward_recorded(m, np.array([[-1.0, 2.0]], dtype=F32))
        np.testing.assert_array_equal(rec.pre[0], [[-1.0, 2.0]])
        np.testing.assert_array_equal(rec.post[0], [[0.0, 2.0]])

    def test_replay_is_bit_exact(self):
        m = models.fixture_cnn(seed=5)
        x = np.random.default_rng(5).normal(size=(3, 1, 10, 10)).astype(F32)
        _, rec = nn.forward_recorded(m, x)
        last = m.layers[-1].layer_id
        replayed = nn.replay_layer(m, last, rec.pre[last])
        assert replayed.tobytes() == rec.post[last].tobytes()

    def test_record_length_matches_layers(self):
        m = nn.Model(
            [nn.Dense(0, np.eye(4, dtype=F32)), nn.ReLU(1),
             nn.Dense(2, np.eye(4, dtype=F32))],
            (4,), 4)
        _, rec = nn.forward_recorded(m, np.zeros((2, 4), dtype=F32))
        assert len(rec) == 3


class TestModelValidation:
    def test_duplicate_ids_rejected(self):
        with pytest.raises(InvalidShape):
            nn.Model([nn.ReLU(0), nn.ReLU(0)], (3,), 3)

    def test_output_head_shape_enforced(self):
        with pytest.raises(InvalidShape):
            nn.Model([nn.Dense(0, np.eye(3, dtype=F32))], (3,), 7)

    def test_residual_source_must_precede(self):
        rng = np.random.default_rng(0)
        layers = [
            nn.ResidualAdd(0, source_id=1),
            models.dense(1, rng, 4, 2),
        ]
        with pytest.raises(InvalidShape):
            nn.Model(layers, (4,), 2)

    def test_negative_running_var_rejected(self):
        bn = models.batchnorm(0, 3)
        bn.running_var[1] = -0.5
        with pytest.raises(InvalidShape):
            nn.Model([bn, nn.Flatten(1)], (3, 2, 2), 12)


class TestSerialization:
    def test_round_trip_bitwise(self, tmp_path):
        m = models.fixture_cnn(seed=11)
        path = tmp_path / "m.dnet"
        save_model(m, path)
        m2 = load_model(path)
        assert m.param_bytes() == m2.param_bytes()
        assert [l.kind for l in m.layers] == [l.kind for l in m2.layers]
        assert m2.input_shape == m.input_shape

    def test_round_trip_residual(self, tmp_path):
        m = models.residual_cnn(seed=2)
        path = tmp_path / "m.dnet"
        save_model(m, path)
        m2 = load_model(path)
        assert m.param_bytes() == m2.param_bytes()
        x = np.random.default_rng(0).normal(size=(2, 2, 8, 8)).astype(F32)
        assert nn.forward(m, x).tobytes() == nn.forward(m2, x).tobytes()

    def test_truncated_blob(self, tmp_path):
        m = models.fixture_cnn()
        path = tmp_path / "m.dnet"
        save_model(m, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-12])
        with pytest.raises(FormatError, match="bytes"):
            load_model(path)

    def test_unsupported_version(self, tmp_path):
        import json
        m = models.fixture_cnn()
        path = tmp_path / "m.dnet"
        save_model(m, path)
        raw = path.read_bytes()
        hlen = int.from_bytes(raw[4:8], "little")
        header = json.loads(raw[8:8 + hlen])
        header["version"] = 99
        new_header = json.dumps(header).encode("utf-8")
        path.write_bytes(raw[:4] + len(new_header).to_bytes(4, "little")
                         + new_header + raw[8 + hlen:])
        with pytest.raises(UnsupportedVersion):
            load_model(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.dnet"
        path.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(FormatError, match="magic"):
            load_model(path)


class TestRandomNets:
    def test_generator_produces_valid_forwards(self):
        rng = np.random.default_rng(42)
        for i in range(20):
            m = random_small_net(rng, with_residual=(i % 4 == 0))
            x = rng.normal(size=(2,) + m.input_shape).astype(F32)
            out = nn.forward(m, x)
            assert out.shape == (2, m.class_count)
            assert np.all(np.isfinite(out))
