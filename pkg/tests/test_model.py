import struct

import numpy as np
import pytest

from conftest import central_diff
from emsoftmax.model import (
    CheckpointError,
    EnsembleClassifier,
    MlpFeatureExtractor,
    WeakClassifierBank,
    load_checkpoint,
    save_checkpoint,
)
from emsoftmax.tensor import Rng


class TestMlpFeatureExtractor:
    def test_zero_init_without_rng(self):
        net = MlpFeatureExtractor([4, 3, 2])
        assert all(np.all(w == 0) for w in net.weights)
        assert all(np.all(b == 0) for b in net.biases)
        assert net.input_dim == 4 and net.feature_dim == 2

    def test_gaussian_init_with_rng(self):
        net = MlpFeatureExtractor([100, 80], Rng(1))
        w = net.weights[0]
        assert abs(w.std() - np.sqrt(2.0 / 180.0)) < 0.005
        assert np.all(net.biases[0] == 0)

    def test_forward_manual_relu_stack(self):
        net = MlpFeatureExtractor([2, 2, 1])
        net.weights[0] = np.array([[1.0, -1.0], [0.0, 2.0]])
        net.biases[0] = np.array([[0.5, -0.5]])
        net.weights[1] = np.array([[1.0], [3.0]])
        x = np.array([[1.0, 1.0], [-2.0, 0.5]])
        feats, cache = net.forward(x)
        hidden = np.maximum(x @ net.weights[0] + net.biases[0], 0.0)
        np.testing.assert_array_equal(feats, hidden @ net.weights[1])
        assert len(cache) == 2

    def test_relu_clips_negative_preactivations(self):
        net = MlpFeatureExtractor([1, 1, 1])
        net.weights[0] = np.array([[1.0]])
        net.weights[1] = np.array([[1.0]])
        feats, _ = net.forward(np.array([[-3.0]]))
        assert feats[0, 0] == 0.0

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        net = MlpFeatureExtractor([4, 5, 3], Rng(7))
        x = rng.normal(size=(6, 4))
        target = rng.normal(size=(6, 3))

        def scalar(net_):
            f, _ = net_.forward(x)
            return 0.5 * float(np.sum((f - target) ** 2))

        feats, cache = net.forward(x)
        param_grads, grad_in = net.backward(cache, feats - target)

        for i in range(2):
            def f_w(w, i=i):
                old = net.weights[i]
                net.weights[i] = w
                try:
                    return scalar(net)
                finally:
                    net.weights[i] = old

            np.testing.assert_allclose(
                param_grads[i][0], central_diff(f_w, net.weights[i].copy()), atol=1e-5
            )

            def f_b(b, i=i):
                old = net.biases[i]
                net.biases[i] = b
                try:
                    return scalar(net)
                finally:
                    net.biases[i] = old

            np.testing.assert_allclose(
                param_grads[i][1], central_diff(f_b, net.biases[i].copy()), atol=1e-5
            )

        def f_x(xx):
            f, _ = net.forward(xx)
            return 0.5 * float(np.sum((f - target) ** 2))

        np.testing.assert_allclose(grad_in, central_diff(f_x, x.copy()), atol=1e-5)

    def test_validation(self):
        with pytest.raises(ValueError):
            MlpFeatureExtractor([4])
        with pytest.raises(ValueError):
            MlpFeatureExtractor([4, 0, 2])
        net = MlpFeatureExtractor([4, 2])
        with pytest.raises(ValueError, match="input dim"):
            net.forward(np.zeros((1, 5)))
        with pytest.raises(ValueError):
            net.backward([], np.zeros((1, 2)))


class TestWeakClassifierBank:
    def test_heads_have_distinct_initializations(self):
        bank = WeakClassifierBank(6, 4, 3, Rng(5))
        assert bank.num_heads == 3
        assert not np.array_equal(bank.heads[0], bank.heads[1])
        assert not np.array_equal(bank.heads[1], bank.heads[2])

    def test_deterministic_given_rng_seed(self):
        a = WeakClassifierBank(6, 4, 2, Rng(5))
        b = WeakClassifierBank(6, 4, 2, Rng(5))
        for wa, wb in zip(a.heads, b.heads):
            np.testing.assert_array_equal(wa, wb)

    def test_assemble_averages_heads(self):
        bank = WeakClassifierBank(3, 2, 2, Rng(0))
        bank.heads = [np.full((3, 2), 1.0), np.full((3, 2), 3.0)]
        clf = bank.assemble()
        np.testing.assert_array_equal(clf.w_avg, np.full((3, 2), 2.0))

    def test_single_head_assemble_is_identity(self):
        bank = WeakClassifierBank(4, 3, 1, Rng(2))
        np.testing.assert_array_equal(bank.assemble().w_avg, bank.heads[0])

    def test_validation(self):
        with pytest.raises(ValueError):
            WeakClassifierBank(0, 3, 1, Rng(0))
        with pytest.raises(ValueError):
            WeakClassifierBank(3, 3, 0, Rng(0))


class TestEnsembleClassifier:
    def test_predict_argmax(self):
        clf = EnsembleClassifier(np.array([[1.0, 0.0], [0.0, 1.0]]))
        pred = clf.predict(np.array([[2.0, 1.0], [0.1, 0.4]]))
        np.testing.assert_array_equal(pred, [0, 1])

    def test_ties_resolve_to_lowest_index(self):
        clf = EnsembleClassifier(np.eye(3))
        pred = clf.predict(np.array([[1.0, 1.0, 1.0], [0.0, 2.0, 2.0]]))
        np.testing.assert_array_equal(pred, [0, 1])

    def test_dim_mismatch(self):
        clf = EnsembleClassifier(np.eye(3))
        with pytest.raises(ValueError, match="dim"):
            clf.scores(np.zeros((1, 4)))


class TestCheckpoint:
    def make_pair(self):
        net = MlpFeatureExtractor([5, 4, 3], Rng(11))
        bank = WeakClassifierBank(3, 4, 2, Rng(12))
        return net, bank

    def test_round_trip_bitwise(self, tmp_path):
        net, bank = self.make_pair()
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, net, bank)
        net2, bank2 = load_checkpoint(path)
        assert net2.layer_dims == net.layer_dims
        for a, b in zip(net.weights, net2.weights):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(net.biases, net2.biases):
            np.testing.assert_array_equal(a, b)
        assert bank2.num_heads == 2
        assert bank2.feature_dim == 3 and bank2.num_classes == 4
        for a, b in zip(bank.heads, bank2.heads):
            np.testing.assert_array_equal(a, b)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_corrupted_byte_fails_checksum(self, tmp_path):
        net, bank = self.make_pair()
        path = tmp_path / "x.ckpt"
        save_checkpoint(path, net, bank)
        blob = bytearray(path.read_bytes())
        blob[30] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)

    def test_truncated_file(self, tmp_path):
        net, bank = self.make_pair()
        path = tmp_path / "x.ckpt"
        save_checkpoint(path, net, bank)
        blob = path.read_bytes()
        path.write_bytes(blob[:3])
        with pytest.raises(CheckpointError, match="short"):
            load_checkpoint(path)

    def test_unsupported_version(self, tmp_path):
        import zlib

        net, bank = self.make_pair()
        path = tmp_path / "x.ckpt"
        save_checkpoint(path, net, bank)
        blob = bytearray(path.read_bytes()[:-4])
        # bump the version word that follows the 4-byte magic
        blob[4:8] = struct.pack("<I", 99)
        crc = zlib.crc32(bytes(blob)) & 0xFFFFFFFF
        path.write_bytes(bytes(blob) + struct.pack("<I", crc))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)
