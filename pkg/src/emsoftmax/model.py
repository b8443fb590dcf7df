"""Small MLP feature extractor, weak-classifier bank, and checkpoints.

The network is deliberately modest: a stack of affine+ReLU layers with a
linear output producing the feature vector that the bank of weak linear
classifiers scores. At test time the bank collapses into one averaged
classifier ``W = (1/V) sum_v Wv`` so prediction cost does not grow with
the ensemble size.

Checkpoints are a self-describing little-endian binary format (magic,
version, layer dims, raw float64 payload, CRC-32 trailer). Loading
verifies magic, version, and checksum separately so corruption reports
what actually went wrong.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .tensor import Rng, as_matrix, gaussian_init, xavier_scale

__all__ = [
    "MlpFeatureExtractor",
    "WeakClassifierBank",
    "EnsembleClassifier",
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
]

_MAGIC = b"EMSM"
_VERSION = 1


class CheckpointError(Exception):
    """A checkpoint file is unreadable: wrong magic, version, size, or CRC."""


class MlpFeatureExtractor:
    """Affine+ReLU stack with a linear final layer.

    layer_dims lists every width from input to feature output, e.g.
    ``[784, 512, 256]`` is 784 -> ReLU(512) -> 256. Weights are Gaussian
    with Xavier scale sqrt(2/(fan_in+fan_out)) when an Rng is given and
    zero otherwise (useful for handcrafted tests); biases start at zero.
    """

    def __init__(self, layer_dims, rng: Rng | None = None):
        dims = [int(d) for d in layer_dims]
        if len(dims) < 2:
            raise ValueError("need at least an input and an output dim")
        if any(d < 1 for d in dims):
            raise ValueError(f"layer dims must be positive, got {dims}")
        self.layer_dims = dims
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            if rng is None:
                w = np.zeros((fan_in, fan_out))
            else:
                w = gaussian_init(fan_in, fan_out, xavier_scale(fan_in, fan_out), rng)
            self.weights.append(w)
            self.biases.append(np.zeros((1, fan_out)))

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def feature_dim(self) -> int:
        return self.layer_dims[-1]

    def forward(self, x_batch: np.ndarray):
        """Features plus the cache of pre-activations the backward needs."""
        a = as_matrix(x_batch, "x_batch")
        if a.shape[1] != self.input_dim:
            raise ValueError(
                f"network expects input dim {self.input_dim}, got {a.shape[1]}"
            )
        inputs = []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(a)
            a = a @ w + b
            if i < last:
                a = np.maximum(a, 0.0)
        return a, inputs

    def backward(self, cache, grad_features: np.ndarray):
        """Backpropagate a feature gradient through the stack.

        Returns ([(grad_w, grad_b), ...] aligned with the layers, and the
        gradient with respect to the input batch.
        """
        grad = as_matrix(grad_features, "grad_features")
        if len(cache) != len(self.weights):
            raise ValueError("cache does not match the network depth")
        param_grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(self.weights)
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            a_in = cache[i]
            if i < last:
                # ReLU mask from the recomputed pre-activation; cheaper to
                # recompute than to cache both sides of every layer.
                pre = a_in @ self.weights[i] + self.biases[i]
                grad = grad * (pre > 0.0)
            grad_w = a_in.T @ grad
            grad_b = np.sum(grad, axis=0, keepdims=True)
            param_grads[i] = (grad_w, grad_b)
            grad = grad @ self.weights[i].T
        return param_grads, grad


class WeakClassifierBank:
    """V weak linear classifiers (d x K each) over a shared feature space.

    Heads are initialized from per-head spawned RNG streams so each head
    starts at a different point; identical starts would make the
    diversity penalty's symmetry hard to break.
    """

    def __init__(self, feature_dim: int, num_classes: int, num_heads: int, rng: Rng):
        if feature_dim < 1 or num_classes < 1:
            raise ValueError("feature_dim and num_classes must be positive")
        if num_heads < 1:
            raise ValueError("num_heads must be at least 1")
        self.feature_dim = int(feature_dim)
        self.num_classes = int(num_classes)
        scale = xavier_scale(feature_dim, num_classes)
        self.heads = [
            gaussian_init(feature_dim, num_classes, scale, rng.spawn(1000 + v))
            for v in range(num_heads)
        ]

    @property
    def num_heads(self) -> int:
        return len(self.heads)

    def assemble(self) -> "EnsembleClassifier":
        """Average the heads into the single test-time classifier."""
        w_avg = np.mean(np.stack(self.heads), axis=0)
        return EnsembleClassifier(w_avg)


class EnsembleClassifier:
    """Test-time classifier holding the averaged weight matrix."""

    def __init__(self, w_avg: np.ndarray):
        self.w_avg = as_matrix(w_avg, "w_avg")

    def scores(self, features: np.ndarray) -> np.ndarray:
        features = as_matrix(features, "features")
        if features.shape[1] != self.w_avg.shape[0]:
            raise ValueError(
                f"classifier expects features of dim {self.w_avg.shape[0]}, "
                f"got {features.shape[1]}"
            )
        return features @ self.w_avg

    def predict(self, features: np.ndarray) -> np.ndarray:
        """Argmax labels; ties resolve to the lowest class index."""
        return np.argmax(self.scores(features), axis=1)


def _pack_array(a: np.ndarray) -> bytes:
    data = np.ascontiguousarray(a, dtype="<f8").tobytes()
    return struct.pack("<II", a.shape[0], a.shape[1]) + data


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(
                f"truncated checkpoint: wanted {n} bytes at offset {self.pos}, "
                f"file has {len(self.blob)}"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def array(self) -> np.ndarray:
        rows, cols = struct.unpack("<II", self.take(8))
        raw = self.take(rows * cols * 8)
        return np.frombuffer(raw, dtype="<f8").reshape(rows, cols).copy()


def save_checkpoint(path, net: MlpFeatureExtractor, bank: WeakClassifierBank) -> None:
    """Write network + bank to ``path`` with a CRC-32 trailer."""
    body = bytearray()
    body += struct.pack("<I", _VERSION)
    body += struct.pack("<I", len(net.layer_dims))
    for d in net.layer_dims:
        body += struct.pack("<I", d)
    for w, b in zip(net.weights, net.biases):
        body += _pack_array(w)
        body += _pack_array(b)
    body += struct.pack(
        "<III", bank.num_heads, bank.feature_dim, bank.num_classes
    )
    for w in bank.heads:
        body += _pack_array(w)
    blob = _MAGIC + bytes(body)
    crc = zlib.crc32(blob) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(blob + struct.pack("<I", crc))


def load_checkpoint(path) -> tuple[MlpFeatureExtractor, WeakClassifierBank]:
    """Read a checkpoint, verifying magic, version, and checksum."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(_MAGIC) + 4:
        raise CheckpointError(f"file too short to be a checkpoint ({len(blob)} bytes)")
    if blob[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"bad magic {blob[:len(_MAGIC)]!r}, expected {_MAGIC!r}")
    payload, trailer = blob[:-4], blob[-4:]
    crc = struct.unpack("<I", trailer)[0]
    actual = zlib.crc32(payload) & 0xFFFFFFFF
    if crc != actual:
        raise CheckpointError(
            f"checksum mismatch: stored {crc:#010x}, computed {actual:#010x}"
        )
    r = _Reader(payload)
    r.take(len(_MAGIC))
    version = r.u32()
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    n_dims = r.u32()
    dims = [r.u32() for _ in range(n_dims)]
    net = MlpFeatureExtractor(dims)
    for i in range(len(dims) - 1):
        net.weights[i] = r.array()
        net.biases[i] = r.array()
    num_heads = r.u32()
    feature_dim = r.u32()
    num_classes = r.u32()
    bank = WeakClassifierBank.__new__(WeakClassifierBank)
    bank.feature_dim = feature_dim
    bank.num_classes = num_classes
    bank.heads = [r.array() for _ in range(num_heads)]
    for i, w in enumerate(bank.heads):
        if w.shape != (feature_dim, num_classes):
            raise CheckpointError(
                f"head {i} has shape {w.shape}, header says "
                f"({feature_dim}, {num_classes})"
            )
    return net, bank
