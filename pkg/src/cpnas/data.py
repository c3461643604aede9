"""Datasets: the CIFAR-10 binary format, a synthetic blob generator and splits.

Images are float NCHW arrays. CIFAR pixels are mapped to [-1, +1] with
``p / 127.5 - 1``. Splits are deterministic index lists derived from a seed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)


class DataError(Exception):
    """Missing, truncated or malformed input data."""


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be NCHW, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index: np.ndarray) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.num_classes)

    def batches(self, batch_size: int, order: np.ndarray | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Yield ``(images, labels)`` batches in ``order``; the last batch may be short."""
        if batch_size <= 0:
            raise ValueError(f"batch_size must be positive, got {batch_size}")
        if order is None:
            order = np.arange(len(self))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            yield self.images[idx], self.labels[idx]


# --------------------------------------------------------------------------
# CIFAR-10 binary batches
# --------------------------------------------------------------------------


def parse_cifar_records(blob: bytes, name: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    """Split a binary batch into uint8 labels (N,) and uint8 pixels (N, 3, 32, 32)."""
    if len(blob) == 0 or len(blob) % CIFAR_RECORD:
        raise DataError(f"{name}: size {len(blob)} is not a positive multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0]
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DataError(f"{name}: record {bad} has label {labels[bad]} > 9")
    return labels.copy(), rec[:, 1:].reshape(-1, 3, 32, 32)


def scale_pixels(pixels: np.ndarray) -> np.ndarray:
    return (pixels.astype(T.get_dtype()) / 127.5 - 1).astype(T.get_dtype())


def load_cifar10(path: str, split: str = "train") -> Dataset:
    """Read the standard binary distribution from directory ``path``."""
    files = {"train": CIFAR_TRAIN_FILES, "test": CIFAR_TEST_FILES}.get(split)
    if files is None:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    if not os.path.isdir(path):
        raise DataError(f"CIFAR-10 directory not found: {path}")
    present = [f for f in files if os.path.exists(os.path.join(path, f))]
    if not present:
        raise DataError(f"no {split} batch files ({', '.join(files)}) in {path}")
    labels, pixels = [], []
    for f in present:
        with open(os.path.join(path, f), "rb") as fh:
            lab, pix = parse_cifar_records(fh.read(), f)
        labels.append(lab)
        pixels.append(pix)
    return Dataset(scale_pixels(np.concatenate(pixels)), np.concatenate(labels).astype(np.int64), 10)


# --------------------------------------------------------------------------
# synthetic class-conditional blobs
# --------------------------------------------------------------------------


_CHUNK = 2048


def _prototypes(rng: np.random.Generator, classes: int, channels: int, size: int, blobs: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    protos = np.zeros((classes, channels, size, size))
    for c in range(classes):
        for _ in range(blobs):
            cy, cx = rng.uniform(0, size, 2)
            width = rng.uniform(size / 10, size / 4)
            colour = rng.normal(size=channels)
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
            protos[c] += colour[:, None, None] * bump
        protos[c] /= max(np.abs(protos[c]).max(), 1e-12)
    return protos


def synth_dataset(
    classes: int,
    samples: int,
    size: int,
    seed: int,
    separation: float = 1.0,
    channels: int = 3,
    noise: float = 1.0,
    jitter: int = 1,
    blobs: int = 3,
) -> Dataset:
    """Balanced class-conditional Gaussian-blob images.

    Each class owns a prototype built from ``blobs`` coloured Gaussian bumps.
    A sample is ``separation * prototype`` rolled by up to ``jitter`` pixels,
    plus isotropic Gaussian noise of scale ``noise``.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if samples <= 0 or size <= 0:
        raise ValueError("samples and size must be positive")
    rng = np.random.default_rng(seed)
    protos = _prototypes(rng, classes, channels, size, blobs)
    labels = rng.permutation(np.arange(samples) % classes).astype(np.int64)
    shifts = rng.integers(-jitter, jitter + 1, size=(samples, 2)) if jitter else np.zeros((samples, 2), int)
    dtype = T.get_dtype()
    images = np.empty((samples, channels, size, size), dtype=dtype)
    for start in range(0, samples, _CHUNK):
        stop = min(start + _CHUNK, samples)
        block = np.stack([np.roll(protos[labels[s]], tuple(shifts[s]), axis=(1, 2)) for s in range(start, stop)])
        noise_block = rng.standard_normal(size=block.shape)
        images[start:stop] = separation * block + noise * noise_block
    return Dataset(images, labels, classes)


# --------------------------------------------------------------------------
# splits and augmentation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSplit:
    """Index lists into the training set; ``test`` indexes the separate test set."""

    search_train: np.ndarray
    search_val: np.ndarray
    eval_train: np.ndarray
    test: np.ndarray

    def check_disjoint(self) -> None:
        if np.intersect1d(self.search_train, self.search_val).size:
            raise DataError("search_train and search_val overlap")


def make_splits(
    n_train: int, n_test: int, seed: int, search_fraction: float = 0.5, val_fraction: float = 0.05
) -> DatasetSplit:
    """Search-train and search-val are disjoint fractions of one shuffled order.

    The evaluation phase trains on the whole training set and is scored on the
    separate test set.
    """
    if not (0 < search_fraction and 0 < val_fraction and search_fraction + val_fraction <= 1):
        raise ValueError(f"bad split fractions {search_fraction}, {val_fraction}")
    order = np.random.default_rng(seed).permutation(n_train)
    n_search = int(round(search_fraction * n_train))
    n_val = max(1, int(round(val_fraction * n_train)))
    split = DatasetSplit(
        search_train=np.sort(order[:n_search]),
        search_val=np.sort(order[n_search : n_search + n_val]),
        eval_train=np.arange(n_train),
        test=np.arange(n_test),
    )
    split.check_disjoint()
    return split


def cutout(images: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Zero one ``size`` x ``size`` square per image; the centre may sit near the border."""
    out = images.copy()
    n, _, h, w = images.shape
    cy = rng.integers(0, h, n)
    cx = rng.integers(0, w, n)
    for s in range(n):
        y0, y1 = max(cy[s] - size // 2, 0), min(cy[s] + size - size // 2, h)
        x0, x1 = max(cx[s] - size // 2, 0), min(cx[s] + size - size // 2, w)
        out[s, :, y0:y1, x0:x1] = 0
    return out
