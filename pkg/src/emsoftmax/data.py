"""Dataset handling: IDX image files, preprocessing, synthetic blobs.

The IDX reader covers the classic big-endian format used by the MNIST
distribution files: magic 0x00000803 for uint8 image tensors and
0x00000801 for uint8 label vectors. Gzipped files are detected from the
two-byte gzip signature, so both ``t10k-images-idx3-ubyte`` and
``t10k-images-idx3-ubyte.gz`` work unchanged. Pixels scale to [0, 1];
the only other preprocessing offered is global mean subtraction with the
training mean applied to every split.

When no image data is on disk, :func:`synth_blobs` generates a
deterministic Gaussian-mixture classification problem from the same
counter-based RNG used everywhere else, which keeps the trainer and CLI
exercisable end to end.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Rng, as_matrix

__all__ = [
    "Dataset",
    "IdxFormatError",
    "load_idx_images",
    "load_idx_labels",
    "load_idx_pair",
    "mean_subtract",
    "save_mean",
    "load_mean",
    "SyntheticSpec",
    "synth_blobs",
    "epoch_batches",
    "minibatch_stream",
]

_IMAGE_MAGIC = 0x00000803
_LABEL_MAGIC = 0x00000801


class IdxFormatError(Exception):
    """An IDX file failed structural validation (magic/size/consistency)."""


@dataclass
class Dataset:
    """Feature matrix (n x d, float64) with integer labels in [0, K)."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    synthetic: bool = False

    def __post_init__(self):
        self.features = as_matrix(self.features, "features")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1:
            raise ValueError(f"labels must be 1-D, got shape {self.labels.shape}")
        if self.labels.shape[0] != self.features.shape[0]:
            raise ValueError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels"
            )
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def take(self, indices) -> "Dataset":
        """Row subset (copy) with the same class count."""
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.features[indices].copy(),
            self.labels[indices].copy(),
            self.num_classes,
            self.synthetic,
        )


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def _header(blob: bytes, path, expected_magic: int, n_dims: int) -> tuple[int, ...]:
    need = 4 * (1 + n_dims)
    if len(blob) < need:
        raise IdxFormatError(f"{path}: header truncated ({len(blob)} bytes)")
    fields = struct.unpack(f">{1 + n_dims}I", blob[:need])
    if fields[0] != expected_magic:
        raise IdxFormatError(
            f"{path}: bad magic {fields[0]:#010x}, expected {expected_magic:#010x}"
        )
    return fields[1:]


def load_idx_images(path) -> np.ndarray:
    """Flattened image matrix (n x rows*cols) scaled to [0, 1]."""
    blob = _read_bytes(path)
    count, rows, cols = _header(blob, path, _IMAGE_MAGIC, 3)
    body = blob[16:]
    expected = count * rows * cols
    if len(body) != expected:
        raise IdxFormatError(
            f"{path}: payload is {len(body)} bytes, header implies {expected}"
        )
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(count, rows * cols)
    return pixels.astype(np.float64) / 255.0


def load_idx_labels(path) -> np.ndarray:
    blob = _read_bytes(path)
    (count,) = _header(blob, path, _LABEL_MAGIC, 1)
    body = blob[8:]
    if len(body) != count:
        raise IdxFormatError(
            f"{path}: payload is {len(body)} bytes, header implies {count}"
        )
    return np.frombuffer(body, dtype=np.uint8).astype(np.int64)


def load_idx_pair(image_path, label_path, num_classes: int | None = None) -> Dataset:
    """Matched image/label files as one Dataset.

    The class count defaults to max(label) + 1, which is 10 for the usual
    digit files.
    """
    images = load_idx_images(image_path)
    labels = load_idx_labels(label_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"{image_path} has {images.shape[0]} images but "
            f"{label_path} has {labels.shape[0]} labels"
        )
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 1
    return Dataset(images, labels, num_classes)


def mean_subtract(train: Dataset, *others: Dataset):
    """Subtract the training-set feature mean from every split.

    Returns (new_train, *new_others, mean_vector). The mean comes from
    the training split only so evaluation data never leaks into
    preprocessing.
    """
    mean = np.mean(train.features, axis=0)
    out = []
    for ds in (train, *others):
        if ds.dim != train.dim:
            raise ValueError(f"split has dim {ds.dim}, train has {train.dim}")
        out.append(
            Dataset(ds.features - mean, ds.labels.copy(), ds.num_classes, ds.synthetic)
        )
    return (*out, mean)


def save_mean(path, mean: np.ndarray) -> None:
    """Persist the preprocessing mean so eval runs can reapply it."""
    mean = np.ascontiguousarray(np.asarray(mean, dtype=np.float64).ravel(), dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", mean.size))
        fh.write(mean.tobytes())


def load_mean(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise IdxFormatError(f"{path}: mean file truncated")
    (size,) = struct.unpack("<I", blob[:4])
    if len(blob) != 4 + 8 * size:
        raise IdxFormatError(
            f"{path}: mean payload is {len(blob) - 4} bytes, header implies {8 * size}"
        )
    return np.frombuffer(blob[4:], dtype="<f8").copy()


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian blob mixture: one spherical cluster per class.

    centers default to random unit-ish directions drawn from the seed, so
    two specs with equal fields describe byte-identical datasets.
    """

    num_classes: int = 10
    samples_per_class: int = 100
    dim: int = 16
    noise_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1 or self.samples_per_class < 1 or self.dim < 1:
            raise ValueError("num_classes, samples_per_class, dim must be positive")
        if self.noise_std <= 0:
            raise ValueError("noise_std must be positive")


def synth_blobs(spec: SyntheticSpec) -> Dataset:
    """Deterministic blob dataset; rows are ordered class by class."""
    rng = Rng(spec.seed)
    centers = rng.spawn(1).normal((spec.num_classes, spec.dim))
    noise_rng = rng.spawn(2)
    n = spec.num_classes * spec.samples_per_class
    features = np.repeat(centers, spec.samples_per_class, axis=0)
    features = features + spec.noise_std * noise_rng.normal((n, spec.dim))
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    return Dataset(features, labels, spec.num_classes, synthetic=True)


def epoch_batches(n: int, batch_size: int, rng: Rng):
    """Index batches covering one shuffled epoch; the tail may be short."""
    if not 1 <= batch_size:
        raise ValueError("batch_size must be positive")
    if n < 1:
        raise ValueError("cannot batch an empty dataset")
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def minibatch_stream(n: int, batch_size: int, rng: Rng):
    """Endless batch indices: reshuffle whenever an epoch is exhausted."""
    while True:
        yield from epoch_batches(n, batch_size, rng)
