"""Network forward contract, whole-net gradients, checkpoint format."""

import json

import numpy as np
import pytest

from anatomap import errors
from anatomap.nn import checkpoint, network, optim
from anatomap.nn import tensor as T

from gradcheck import numeric_grad


@pytest.fixture(scope="module")
def weights():
    return network.NetworkWeights.initialize(seed=0)


class TestForwardShapes:
    def test_feature_scales_for_32_cube(self, weights):
        x = network.patch_batch([np.zeros((32, 32, 32), np.float32)])
        latent, feats = network.forward(x, weights)
        assert latent.shape == (1, 3)
        assert feats[0].shape == (1, 8, 32, 32, 32)
        assert feats[1].shape == (1, 16, 16, 16, 16)
        assert feats[2].shape == (1, 32, 8, 8, 8)

    def test_feature_scales_for_16_cube(self, weights):
        x = network.patch_batch([np.zeros((16, 16, 16), np.float32)] * 2)
        latent, feats = network.forward(x, weights)
        assert latent.shape == (2, 3)
        assert [f.shape[2] for f in feats] == [16, 8, 4]

    def test_indivisible_input_rejected(self, weights):
        x = network.patch_batch([np.zeros((24, 24, 24), np.float32)])
        with pytest.raises(errors.ShapeMismatch):
            network.forward(x, weights)

    def test_deterministic(self, weights):
        rng = np.random.default_rng(1)
        patch = rng.random((16, 16, 16)).astype(np.float32)
        out1 = network.forward(network.patch_batch([patch]), weights)
        out2 = network.forward(network.patch_batch([patch]), weights)
        np.testing.assert_array_equal(out1[0].data, out2[0].data)
        for a, b in zip(out1[1], out2[1]):
            np.testing.assert_array_equal(a.data, b.data)

    def test_unit_norm_feature_vectors(self, weights):
        rng = np.random.default_rng(2)
        x = network.patch_batch([rng.random((16, 16, 16)).astype(np.float32)])
        _, feats = network.forward(x, weights)
        for f in feats:
            norms = np.sqrt((f.data.astype(np.float64) ** 2).sum(axis=1))
            np.testing.assert_allclose(norms, 1.0, atol=1e-5)

    def test_latent_finite_fuzz(self):
        rng = np.random.default_rng(3)
        for trial in range(100):
            w = network.NetworkWeights.initialize(seed=trial)
            x = network.patch_batch([rng.random((16, 16, 16)).astype(np.float32)])
            latent, _ = network.forward(x, w, want_features=False)
            assert np.isfinite(latent.data).all(), trial


class TestWholeNetworkGradient:
    def test_directional_derivative(self, weights):
        # scalar loss = sum of every output; directional derivative
        # along a unit random parameter direction vs central FD
        rng = np.random.default_rng(4)
        w64 = weights.astype(np.float64)
        x_data = rng.random((1, 1, 16, 16, 16))

        def loss_value(ws):
            latent, feats = network.forward(T.Tensor(x_data), ws)
            total = T.tsum(latent)
            for f in feats:
                total = T.add(total, T.tsum(f))
            return total

        loss = loss_value(w64)
        loss.backward()
        direction = {n: rng.standard_normal(p.shape) for n, p in w64.items()}
        norm = np.sqrt(sum((d * d).sum() for d in direction.values()))
        direction = {n: d / norm for n, d in direction.items()}
        analytic = sum(
            float((p.grad * direction[n]).sum())
            for n, p in w64.items() if p.grad is not None)

        h = 1e-4
        def shifted(sign):
            params = {
                n: T.Tensor(p.data + sign * h * direction[n], requires_grad=True)
                for n, p in w64.items()
            }
            return float(loss_value(network.NetworkWeights(params)).data)

        fd = (shifted(+1) - shifted(-1)) / (2 * h)
        assert abs(fd - analytic) / max(abs(fd), abs(analytic)) < 1e-2


class TestAdam:
    def test_zero_gradient_keeps_weights(self):
        p = np.array([1.0, -2.0, 3.0], np.float32)
        state = optim.init_state(p)
        out = optim.adam_step(p, np.zeros_like(p), state)
        np.testing.assert_array_equal(out, p)

    def test_first_step_magnitude_is_lr(self):
        p = np.zeros(4, np.float32)
        state = optim.init_state(p)
        g = np.full(4, 0.5, np.float32)
        out = optim.adam_step(p, g, state, lr=1e-3)
        # bias-corrected first step: lr * g / (|g| + eps)
        np.testing.assert_allclose(np.abs(out), 1e-3, rtol=1e-6)
        assert (np.sign(out) == -1).all()

    def test_quadratic_descent_monotone(self):
        p = np.array([2.0])
        state = optim.init_state(p)
        losses = []
        for _ in range(50):
            g = 2.0 * p  # d/dp of p^2
            p = optim.adam_step(p, g, state, lr=0.05)
            losses.append(float(p[0] ** 2))
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_shape_mismatch(self):
        p = np.zeros(3)
        with pytest.raises(errors.ShapeMismatch):
            optim.adam_step(p, np.zeros(4), optim.init_state(p))


class TestCheckpoint:
    def test_round_trip_bit_exact(self, weights, tmp_path):
        p1 = tmp_path / "a.json"
        p2 = tmp_path / "b.json"
        checkpoint.save_checkpoint(weights, p1, extras={"r_mm": [192.0] * 3})
        loaded, extras = checkpoint.load_checkpoint(p1)
        assert extras == {"r_mm": [192.0] * 3}
        checkpoint.save_checkpoint(loaded, p2, extras=extras)
        assert p1.read_bytes() == p2.read_bytes()
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
        for name, p in weights.items():
            np.testing.assert_array_equal(p.data, loaded[name].data)

    def test_truncated_blob_rejected(self, weights, tmp_path):
        path = tmp_path / "ck.json"
        checkpoint.save_checkpoint(weights, path)
        blob = tmp_path / "ck.bin"
        blob.write_bytes(blob.read_bytes()[:-17])
        with pytest.raises(errors.CorruptCheckpoint):
            checkpoint.load_checkpoint(path)

    def test_flipped_bit_rejected(self, weights, tmp_path):
        path = tmp_path / "ck.json"
        checkpoint.save_checkpoint(weights, path)
        blob = tmp_path / "ck.bin"
        raw = bytearray(blob.read_bytes())
        raw[100] ^= 0x40
        blob.write_bytes(bytes(raw))
        with pytest.raises(errors.CorruptCheckpoint):
            checkpoint.load_checkpoint(path)

    def test_edited_shape_rejected(self, weights, tmp_path):
        path = tmp_path / "ck.json"
        checkpoint.save_checkpoint(weights, path)
        manifest = json.loads(path.read_text())
        manifest["layers"][0]["shape"] = [8, 1, 3, 3, 2]
        path.write_text(json.dumps(manifest))
        with pytest.raises(errors.ShapeManifestMismatch):
            checkpoint.load_checkpoint(path)

    def test_wrong_format_rejected(self, tmp_path):
        path = tmp_path / "ck.json"
        path.write_text('{"format": "OTHER"}')
        with pytest.raises(errors.CorruptCheckpoint):
            checkpoint.load_checkpoint(path)


class TestWeights:
    def test_initialize_deterministic(self):
        a = network.NetworkWeights.initialize(seed=5)
        b = network.NetworkWeights.initialize(seed=5)
        for name, p in a.items():
            np.testing.assert_array_equal(p.data, b[name].data)

    def test_wrong_shape_rejected(self):
        params = {n: T.Tensor(np.zeros(s, np.float32), requires_grad=True)
                  for n, s in network.parameter_shapes().items()}
        params["mlp.fc3.w"] = T.Tensor(np.zeros((4, 32), np.float32), requires_grad=True)
        with pytest.raises(errors.ShapeMismatch):
            network.NetworkWeights(params)
