"""Datasets (CIFAR-10 binary format, seeded synthetic blobs) and a deterministic batcher."""
from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T

RECORD = 3073
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (N, C, H, W) standardized float64
    labels: np.ndarray  # (N,) int64
    classes: int
    mean: tuple[float, ...]  # per-channel constants applied to [0, 1] pixels
    std: tuple[float, ...]

    def __post_init__(self):
        n = self.images.shape[0]
        if n < 1 or self.labels.shape != (n,):
            raise DataError(f"{n} images but labels of shape {self.labels.shape}")
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise DataError(f"labels must lie in [0, {self.classes})")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> "Dataset":
        return replace(self, images=self.images[idx], labels=self.labels[idx])


def channel_stats(images: np.ndarray) -> tuple[tuple[float, ...], tuple[float, ...]]:
    mean = images.mean(axis=(0, 2, 3))
    std = images.std(axis=(0, 2, 3))
    std = np.where(std > 0, std, 1.0)
    return tuple(float(v) for v in mean), tuple(float(v) for v in std)


def standardize(raw: np.ndarray, labels: np.ndarray, classes: int, stats=None) -> Dataset:
    """Wrap [0, 1] images, standardizing with ``stats`` or the images' own per-channel stats."""
    mean, std = channel_stats(raw) if stats is None else stats
    m = np.asarray(mean).reshape(1, -1, 1, 1)
    s = np.asarray(std).reshape(1, -1, 1, 1)
    return Dataset((raw - m) / s, labels.astype(np.int64), classes, tuple(mean), tuple(std))


# CIFAR-10 -------------------------------------------------------------------

def read_cifar_records(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    """Raw uint8 images (N, 3, 32, 32) and labels from one binary batch file."""
    buf = Path(path).read_bytes()
    if len(buf) == 0 or len(buf) % RECORD:
        whole = len(buf) // RECORD * RECORD
        raise DataError(f"{path}: truncated record at byte offset {whole} "
                        f"(file size {len(buf)} is not a multiple of {RECORD})")
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DataError(f"{path}: label {labels[bad[0]]} > 9 at byte offset {bad[0] * RECORD}")
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def load_cifar10_raw(path: str | os.PathLike, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
    """[0, 1] float images and labels from a directory of ``*.bin`` batches or one batch file."""
    path = Path(path)
    if path.is_dir():
        names = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
        files = [path / n for n in names]
        missing = [str(f) for f in files if not f.exists()]
        if missing:
            raise DataError(f"missing CIFAR-10 files: {', '.join(missing)}")
    elif path.exists():
        files = [path]
    else:
        raise DataError(f"no CIFAR-10 data at {path}")
    parts = [read_cifar_records(f) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return images.astype(T.DTYPE) / 255.0, labels


def load_cifar10(path: str | os.PathLike, split: str = "train", limit: int | None = None,
                 stats=None) -> Dataset:
    """Standardized CIFAR-10 split; ``stats`` (mean, std) lets a test split reuse training constants."""
    images, labels = load_cifar10_raw(path, split)
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    return standardize(images, labels, 10, stats)


def cifar10_splits(path: str | os.PathLike, seed: int, n_train: int, n_val: int,
                   n_test: int | None = None) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded disjoint train/val subsets of the training files plus the test file.

    Standardization constants come from the training subset and are reused
    for validation and test.
    """
    images, labels = load_cifar10_raw(path, "train")
    if n_train + n_val > len(labels):
        raise DataError(f"asked for {n_train + n_val} training images, only {len(labels)} available")
    order = T.make_rng(seed).permutation(len(labels))
    tr_idx, val_idx = order[:n_train], order[n_train:n_train + n_val]
    train_ds = standardize(images[tr_idx], labels[tr_idx], 10)
    stats = (train_ds.mean, train_ds.std)
    val_ds = standardize(images[val_idx], labels[val_idx], 10, stats)
    return train_ds, val_ds, load_cifar10(path, "test", n_test, stats)


# synthetic blobs --------------------------------------------------------------

def synth_raw(seed: int, n: int, classes: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian-blob images in [0, 1]; the blob's row, radius and colour encode the class.

    Classes are assigned round-robin, so ``n = classes * m`` gives exactly m
    per class. Blob columns jitter around the centre so horizontal flips keep
    the label meaningful.
    """
    rng = T.make_rng(seed)
    proto = T.make_rng(12345)  # class prototypes are fixed across seeds
    colours = proto.uniform(0.2, 1.0, size=(classes, 3))
    rows = (np.arange(classes) + 0.5) / classes * size
    radii = size * (0.10 + 0.06 * (np.arange(classes) % 3))
    labels = np.arange(n) % classes
    yy, xx = np.mgrid[0:size, 0:size].astype(T.DTYPE)
    images = np.empty((n, 3, size, size), dtype=T.DTYPE)
    for i, k in enumerate(labels):
        cy = rows[k] + rng.normal(0.0, size * 0.03)
        cx = size / 2 + rng.normal(0.0, size * 0.12)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radii[k] ** 2))
        noise = rng.normal(0.0, 0.08, size=(3, size, size))
        images[i] = np.clip(colours[k][:, None, None] * blob + 0.1 + noise, 0.0, 1.0)
    return images, labels


def synth_dataset(seed: int, n: int, classes: int, size: int = 16, stats=None) -> Dataset:
    images, labels = synth_raw(seed, n, classes, size)
    return standardize(images, labels, classes, stats)


# batching ---------------------------------------------------------------------

@dataclass(frozen=True)
class Batcher:
    batch_size: int
    seed: int = 0
    shuffle: bool = True
    drop_last: bool = True
    augment: bool = False
    pad: int = 4


def _augment(img: np.ndarray, rng: np.random.Generator, pad: int) -> np.ndarray:
    c, h, w = img.shape
    padded = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=img.dtype)
    padded[:, pad:pad + h, pad:pad + w] = img
    dy, dx = rng.integers(0, 2 * pad + 1, size=2)
    out = padded[:, dy:dy + h, dx:dx + w]
    if rng.random() < 0.5:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def batches(ds: Dataset, b: Batcher, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (images, labels) batches for one epoch.

    The order is a permutation keyed by (seed, epoch); augmentation draws from
    a stream keyed by (seed, epoch, sample index), so it does not depend on
    where a sample lands in the order.
    """
    n = len(ds)
    if b.batch_size < 1 or b.batch_size > n:
        raise DataError(f"batch size {b.batch_size} must lie in [1, {n}]")
    order = T.make_rng((b.seed, epoch)).permutation(n) if b.shuffle else np.arange(n)
    stop = n - n % b.batch_size if b.drop_last else n
    for start in range(0, stop, b.batch_size):
        idx = order[start:start + b.batch_size]
        images = ds.images[idx]
        if b.augment:
            images = np.stack([_augment(ds.images[i], T.make_rng((b.seed, epoch, int(i), 1)), b.pad)
                               for i in idx])
        yield images, ds.labels[idx]
