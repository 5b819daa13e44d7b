"""Dataset ingestion: IDX files, the bundled 8x8 digits and synthetic blobs."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass
class DatasetSplit:
    X: np.ndarray  # (N, C, H, W) or (N, d), values in [0, 1]
    y: np.ndarray  # (N,) int64
    name: str = "train"
    means: np.ndarray | None = None

    def __len__(self):
        return len(self.y)

    def __post_init__(self):
        if len(self.X) != len(self.y):
            raise FormatError(f"{len(self.X)} examples but {len(self.y)} labels")


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Read an unsigned-byte IDX file, checking the magic number and payload length."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise FormatError(f"{path}: truncated payload ({len(raw) - header} of {count} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray):
    """Write a uint8 array as IDX (used for fixtures and dataset export)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def load_mnist_idx(images_path, labels_path, limit: int | None = None, name: str = "train") -> DatasetSplit:
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"{images_path} holds {images.shape[0]} images but {labels_path} holds {labels.shape[0]} labels"
        )
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    X = images.astype(np.float64)[:, None, :, :] / 255.0
    return DatasetSplit(X, labels.astype(np.int64), name)


def load_digits_split(n_train: int, n_test: int, seed: int = 0):
    """Shuffled, disjoint train/test splits of scikit-learn's 8x8 digits, scaled to [0, 1]."""
    from sklearn.datasets import load_digits

    digits = load_digits()
    X = digits.images.astype(np.float64)[:, None, :, :] / 16.0
    y = digits.target.astype(np.int64)
    if n_train + n_test > len(y):
        raise FormatError(f"digits has {len(y)} images; asked for {n_train + n_test}")
    order = np.random.default_rng(seed).permutation(len(y))
    tr, te = order[:n_train], order[n_train : n_train + n_test]
    return DatasetSplit(X[tr], y[tr], "train"), DatasetSplit(X[te], y[te], "test")


def export_digits_idx(directory, seed: int = 0, n_train: int = 1000, n_test: int = 500) -> dict:
    """Write the digits splits as IDX files (pixels rescaled 0..255); returns the paths."""
    train, test = load_digits_split(n_train, n_test, seed)
    os.makedirs(directory, exist_ok=True)
    paths = {}
    for split in (train, test):
        img = os.path.join(directory, f"{split.name}-images-idx3-ubyte")
        lab = os.path.join(directory, f"{split.name}-labels-idx1-ubyte")
        write_idx(img, np.round(split.X[:, 0] * 255.0))
        write_idx(lab, split.y)
        paths[split.name] = (img, lab)
    return paths


def synth_blobs(k: int, n_per_class: int, dim: int, margin: float, seed: int, spread: float = 0.05, name="train"):
    """Gaussian clusters in the unit cube whose means are pairwise at least ``margin`` apart."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    rng = np.random.default_rng(seed)
    means = []
    for _ in range(10000):
        cand = rng.uniform(0.0, 1.0, size=dim)
        if all(np.linalg.norm(cand - m) >= margin for m in means):
            means.append(cand)
            if len(means) == k:
                break
    if len(means) < k:
        raise ValueError(f"cannot place {k} means {margin} apart in [0, 1]^{dim}")
    means = np.array(means)
    y = np.repeat(np.arange(k), n_per_class)
    X = np.clip(means[y] + spread * rng.standard_normal((y.size, dim)), 0.0, 1.0)
    order = rng.permutation(y.size)
    return DatasetSplit(X[order], y[order].astype(np.int64), name, means)
