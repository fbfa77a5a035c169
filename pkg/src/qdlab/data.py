"""Dataset ingestion and desk-scale synthetic data.

The on-disk format is the classic CIFAR-10 binary layout: 3073-byte records,
one label byte followed by 3072 pixel bytes (R, G, B planes of a 32x32
image). Pixels are scaled to [0, 1] floats on load.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .seeds import split_seed

RECORD_BYTES = 3073
CIFAR_SHAPE = (3, 32, 32)


class DatasetFormatError(ValueError):
    """Binary file does not parse as whole 3073-byte records."""


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    split: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be [N,C,H,W], got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("one label per image required")
        if self.images.size:
            lo, hi = self.images.min(), self.images.max()
            if lo < 0.0 or hi > 1.0:
                raise ValueError(f"pixel values in [{lo:g}, {hi:g}] exceed [0, 1]")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("negative label")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, n: int, offset: int = 0) -> "Dataset":
        return Dataset(self.images[offset:offset + n], self.labels[offset:offset + n], self.split)

    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0


def load_cifar10_binary(path, max_records: int | None = None) -> Dataset:
    """Read a CIFAR-10-format binary file, optionally only a record prefix.

    An empty file is a valid empty dataset; a trailing partial record is
    rejected with the byte offset where it starts.
    """
    size = os.path.getsize(path)
    if size % RECORD_BYTES != 0:
        raise DatasetFormatError(
            f"{path}: truncated record starting at byte offset {size - size % RECORD_BYTES} "
            f"(file size {size} is not a multiple of {RECORD_BYTES})")
    n = size // RECORD_BYTES
    if max_records is not None:
        n = min(n, max_records)
    with open(path, "rb") as f:
        raw = np.fromfile(f, dtype=np.uint8, count=n * RECORD_BYTES)
    rec = raw.reshape(n, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    images = rec[:, 1:].reshape(n, *CIFAR_SHAPE).astype(np.float32) / 255.0
    return Dataset(images, labels, split=os.path.basename(str(path)))


def save_cifar10_binary(path, dataset: Dataset):
    """Write a dataset of 3x32x32 images back into the binary record format."""
    if dataset.images.shape[1:] != CIFAR_SHAPE:
        raise DatasetFormatError(
            f"binary format holds 3x32x32 images, got {dataset.images.shape[1:]}")
    pixels = np.floor(dataset.images * 255.0 + 0.5).clip(0, 255).astype(np.uint8)
    rec = np.empty((len(dataset), RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = dataset.labels.astype(np.uint8)
    rec[:, 1:] = pixels.reshape(len(dataset), -1)
    with open(path, "wb") as f:
        rec.tofile(f)


def synth_blobs(num_classes: int, n_per_class: int, shape=(3, 8, 8),
                separation: float = 4.0, seed: int = 0, split: str = "train") -> Dataset:
    """Gaussian class blobs in pixel space, clipped to [0, 1].

    Class means are fixed by `seed`; the per-sample noise stream depends on
    `split`, so train/test share geometry but not samples. Noise std is
    0.5/separation, so large separation means trivially separable classes.
    """
    if separation <= 0:
        raise ValueError(f"separation must be positive, got {separation}")
    means_rng = np.random.default_rng(split_seed(seed, "blobs/means"))
    means = means_rng.uniform(0.3, 0.7, size=(num_classes, *shape))
    rng = np.random.default_rng(split_seed(seed, f"blobs/{split}"))
    sigma = 0.5 / separation
    images = np.empty((num_classes * n_per_class, *shape), dtype=np.float32)
    labels = np.empty(num_classes * n_per_class, dtype=np.int64)
    for c in range(num_classes):
        sl = slice(c * n_per_class, (c + 1) * n_per_class)
        images[sl] = means[c] + rng.normal(0.0, sigma, size=(n_per_class, *shape))
        labels[sl] = c
    np.clip(images, 0.0, 1.0, out=images)
    order = rng.permutation(len(labels))
    return Dataset(images[order], labels[order], split=split)


def _box_blur(img: np.ndarray, passes: int = 2) -> np.ndarray:
    """Cheap 3x3 box smoothing with edge replication, applied per channel."""
    out = img
    for _ in range(passes):
        p = np.pad(out, ((0, 0), (1, 1), (1, 1)), mode="edge")
        out = sum(p[:, a:a + out.shape[1], b:b + out.shape[2]]
                  for a in range(3) for b in range(3)) / 9.0
    return out


def synth_textures(num_classes: int = 10, n_per_class: int = 200, seed: int = 0,
                   split: str = "train", bases: int = 12, signal: float = 0.22,
                   coef_noise: float = 1.0, noise: float = 0.12,
                   jitter: int = 3) -> Dataset:
    """CIFAR-shaped synthetic classification data with overlapping classes.

    All classes share one dictionary of smooth random basis fields; a class
    is a coefficient vector over it, and each sample jitters those
    coefficients inside the same subspace, shifts the result, and adds pixel
    noise. Because within-class spread lives where between-class differences
    do, margins stay small: a small CNN lands well below 100% and
    gradient attacks have room to bite, roughly like natural images.
    Dictionary and class vectors depend only on `seed`; samples also on
    `split`. Serves as the stand-in corpus when no real CIFAR-10 binaries
    are available.
    """
    geom_rng = np.random.default_rng(split_seed(seed, "textures/geometry"))
    fields = np.empty((bases, *CIFAR_SHAPE), dtype=np.float64)
    for b in range(bases):
        up = np.repeat(np.repeat(geom_rng.normal(size=(3, 8, 8)), 4, axis=1), 4, axis=2)
        sm = _box_blur(up)
        sm -= sm.mean()
        fields[b] = sm / sm.std()
    class_coefs = geom_rng.normal(size=(num_classes, bases))
    class_coefs /= np.linalg.norm(class_coefs, axis=1, keepdims=True)

    rng = np.random.default_rng(split_seed(seed, f"textures/{split}"))
    n = num_classes * n_per_class
    labels = np.tile(np.arange(num_classes), n_per_class).astype(np.int64)[:n]
    coefs = class_coefs[labels] + (coef_noise / np.sqrt(bases)) * rng.normal(size=(n, bases))
    flat_fields = fields.reshape(bases, -1)
    signals = (coefs @ flat_fields).reshape(n, *CIFAR_SHAPE)

    images = np.empty((n, *CIFAR_SHAPE), dtype=np.float32)
    shifts = rng.integers(-jitter, jitter + 1, size=(n, 2))
    pixel_noise = rng.normal(0.0, noise, size=(n, *CIFAR_SHAPE))
    for i in range(n):
        s = np.roll(signals[i], (int(shifts[i, 0]), int(shifts[i, 1])), axis=(1, 2))
        images[i] = np.clip(0.5 + signal * s + pixel_noise[i], 0.0, 1.0)
    order = rng.permutation(n)
    return Dataset(images[order], labels[order], split=split)


def write_synth_cifar(out_dir, n_train: int = 2000, n_test: int = 1000, seed: int = 0,
                      **texture_kw) -> tuple[str, str]:
    """Materialize texture data as CIFAR-format binaries; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for split, n in (("train", n_train), ("test", n_test)):
        per_class = -(-n // 10)  # ceil, then trim to the exact count
        ds = synth_textures(10, per_class, seed=seed, split=split).subset(n)
        path = os.path.join(out_dir, f"synth_{split}.bin")
        save_cifar10_binary(path, ds)
        paths.append(path)
    return tuple(paths)
