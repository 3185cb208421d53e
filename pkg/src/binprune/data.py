"""Dataset ingestion: MNIST IDX, CIFAR-10 binary batches, synthetic blobs.

Every loader returns a DatasetHandle whose batch iteration order is a
pure function of (seed, epoch), so training runs are reproducible
bit-for-bit.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixels


class DatasetFormatError(Exception):
    pass


@dataclass
class DatasetHandle:
    name: str
    images: np.ndarray  # (N, C, H, W) float64, normalized
    labels: np.ndarray  # (N,) int64
    classes: int
    mean: np.ndarray  # per-channel normalization stats applied
    std: np.ndarray

    @property
    def n_samples(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def batches(self, batch_size: int, seed: int, epoch: int):
        """Deterministic shuffled minibatches; yields (indices, x, y)."""
        order = np.random.default_rng((seed, epoch)).permutation(self.n_samples)
        for start in range(0, self.n_samples, batch_size):
            idx = order[start : start + batch_size]
            yield idx, self.images[idx], self.labels[idx]

    def subset(self, n: int) -> "DatasetHandle":
        return DatasetHandle(self.name, self.images[:n], self.labels[:n],
                             self.classes, self.mean, self.std)


def _normalize(raw: np.ndarray, classes: int, labels: np.ndarray, name: str):
    """Scale to [0,1] then standardize per channel with the data's own stats."""
    x = raw.astype(np.float64) / 255.0
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    std = np.where(std == 0, 1.0, std)
    x = (x - mean.reshape(1, -1, 1, 1)) / std.reshape(1, -1, 1, 1)
    return DatasetHandle(name, x, labels.astype(np.int64), classes, mean, std)


# ---------------------------------------------------------------------------
# MNIST IDX
# ---------------------------------------------------------------------------


def _read_idx(path, expect_magic: int, expect_ndim: int) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4:
        raise DatasetFormatError(f"{path}: file ends at offset {len(data)}, "
                                 "before the 4-byte magic")
    magic = int.from_bytes(data[0:4], "big")
    if magic != expect_magic:
        raise DatasetFormatError(
            f"{path}: bad magic 0x{magic:08x} at offset 0, "
            f"expected 0x{expect_magic:08x}"
        )
    header = 4 + 4 * expect_ndim
    if len(data) < header:
        raise DatasetFormatError(
            f"{path}: truncated dimension header at offset {len(data)}"
        )
    dims = [int.from_bytes(data[4 + 4 * i : 8 + 4 * i], "big")
            for i in range(expect_ndim)]
    expect_len = header + int(np.prod(dims))
    if len(data) != expect_len:
        raise DatasetFormatError(
            f"{path}: payload ends at offset {len(data)}, expected {expect_len}"
        )
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def load_mnist_idx(path, split: str = "train") -> DatasetHandle:
    """Load MNIST from a directory of IDX files (big-endian, magic-checked)."""
    prefix = "train" if split == "train" else "t10k"
    images = _read_idx(os.path.join(path, f"{prefix}-images-idx3-ubyte"),
                       IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(os.path.join(path, f"{prefix}-labels-idx1-ubyte"),
                       IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise DatasetFormatError(
            f"{path}: {len(images)} images but {len(labels)} labels"
        )
    return _normalize(images[:, None, :, :], 10, labels, f"mnist-{split}")


# ---------------------------------------------------------------------------
# CIFAR-10 binary
# ---------------------------------------------------------------------------


def _read_cifar_file(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) == 0 or len(data) % CIFAR_RECORD_BYTES:
        raise DatasetFormatError(
            f"{path}: size {len(data)} is not a multiple of "
            f"{CIFAR_RECORD_BYTES}; trailing record starts at offset "
            f"{len(data) - len(data) % CIFAR_RECORD_BYTES}"
        )
    records = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0]
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DatasetFormatError(
            f"{path}: label {labels[bad]} out of range at offset "
            f"{bad * CIFAR_RECORD_BYTES}"
        )
    images = records[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def load_cifar10_bin(path, split: str = "train") -> DatasetHandle:
    """Load CIFAR-10 from binary batch files (file or directory path)."""
    if os.path.isdir(path):
        names = ([f"data_batch_{i}.bin" for i in range(1, 6)]
                 if split == "train" else ["test_batch.bin"])
        files = [os.path.join(path, n) for n in names]
        files = [f for f in files if os.path.exists(f)]
        if not files:
            raise DatasetFormatError(f"{path}: no CIFAR-10 {split} batch files found")
    else:
        files = [path]
    parts = [_read_cifar_file(f) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return _normalize(images, 10, labels, f"cifar10-{split}")


# ---------------------------------------------------------------------------
# Synthetic separable blobs
# ---------------------------------------------------------------------------


def synth_dataset(classes: int, samples: int, shape=(3, 32, 32), seed: int = 0,
                  noise: float = 1.0, separation: float = 2.0,
                  template_seed: int | None = None) -> DatasetHandle:
    """Gaussian class-template images plus noise; linearly separable for
    small noise.  Deterministic in (arguments, seed).

    Pass the same ``template_seed`` to two calls with different ``seed``
    values to get independent draws (e.g. train and test splits) from one
    underlying class distribution.
    """
    rng = np.random.default_rng((seed, samples, classes))
    if template_seed is None:
        templates = rng.normal(0.0, 1.0, size=(classes,) + tuple(shape))
    else:
        templates = np.random.default_rng((template_seed, classes)).normal(
            0.0, 1.0, size=(classes,) + tuple(shape)
        )
    labels = np.arange(samples) % classes
    rng.shuffle(labels)
    images = separation * templates[labels] + noise * rng.normal(
        0.0, 1.0, size=(samples,) + tuple(shape)
    )
    mean = images.mean(axis=(0, 2, 3))
    std = images.std(axis=(0, 2, 3))
    std = np.where(std == 0, 1.0, std)
    images = (images - mean.reshape(1, -1, 1, 1)) / std.reshape(1, -1, 1, 1)
    return DatasetHandle(f"synth-{classes}c", images, labels.astype(np.int64),
                         classes, mean, std)
