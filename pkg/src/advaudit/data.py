"""Datasets: synthetic class blobs and the CIFAR binary record format.

CIFAR binary records are label byte(s) followed by a 32x32 RGB image stored
as three row-major channel planes (R, G, B), 3073 bytes per record for the
10-class variant and 3074 (coarse label byte, then fine) for the 100-class
one. Images load as float32 in [0, 1]; saving re-quantizes with
round(x * 255), so data that came from 8-bit files round-trips bit exactly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

CIFAR_SIDE = 32
_PLANE = CIFAR_SIDE * CIFAR_SIDE
_IMAGE_BYTES = 3 * _PLANE

# variant -> (label bytes per record, fine-label range, coarse range or None)
_VARIANTS = {
    "cifar10": (1, 10, None),
    "cifar100": (2, 100, 20),
}


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    coarse_labels: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        n = self.images.shape[0]
        if self.labels.shape != (n,):
            raise ValueError(f"labels shape {self.labels.shape} != ({n},)")
        if n and (not np.isfinite(self.images).all()
                  or self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("images must be finite and lie in [0, 1]")
        if n and self.labels.min() < 0:
            raise ValueError("labels must be non-negative")
        if self.coarse_labels is not None:
            self.coarse_labels = np.asarray(self.coarse_labels, dtype=np.int64)
            if self.coarse_labels.shape != (n,):
                raise ValueError(f"coarse labels shape {self.coarse_labels.shape} != ({n},)")

    def __len__(self):
        return self.images.shape[0]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        coarse = None if self.coarse_labels is None else self.coarse_labels[idx]
        return Dataset(self.images[idx], self.labels[idx], coarse)


def _class_palette(num_classes: int, channels: int) -> np.ndarray:
    # evenly spaced hues so every class gets a distinct color
    c = np.arange(num_classes)[:, None]
    k = np.arange(channels)[None, :]
    return 0.5 + 0.45 * np.cos(2 * np.pi * (c / num_classes + k / max(channels, 1)))


def synth_blobs(num_classes: int, per_class: int, side: int = 16, seed: int = 0,
                noise: float = 0.05, channels: int = 3) -> Dataset:
    """Gaussian color blob per class on a ring, plus pixel noise.

    Class identity is carried by both blob position and color, so a linear
    classifier separates the classes perfectly at noise = 0. Deterministic
    in (seed, shape arguments); samples are grouped by class.
    """
    if num_classes < 1 or per_class < 0 or side < 2 or channels < 1:
        raise ValueError("need num_classes >= 1, per_class >= 0, side >= 2, "
                         "channels >= 1")
    if noise < 0:
        raise ValueError(f"noise must be >= 0, got {noise}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    cx = side / 2 + 0.3 * side * np.cos(angles)
    cy = side / 2 + 0.3 * side * np.sin(angles)
    palette = _class_palette(num_classes, channels)
    sigma = side / 6.0

    images = np.empty((num_classes * per_class, channels, side, side), np.float32)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    for c in range(num_classes):
        bump = np.exp(-((xx - cx[c]) ** 2 + (yy - cy[c]) ** 2) / (2 * sigma ** 2))
        base = 0.1 + 0.8 * palette[c][:, None, None] * bump[None]
        for j in range(per_class):
            img = base + noise * rng.standard_normal((channels, side, side))
            images[c * per_class + j] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels)


def midgray(count: int, side: int = 16, channels: int = 3) -> Dataset:
    """Uniform 0.5-valued images, all labeled 0.

    Fixture corpus for calibration runs: far from both pixel bounds, so a
    multi-round attack accumulates drift without clamping.
    """
    if count < 1 or side < 1 or channels < 1:
        raise ValueError("need count >= 1, side >= 1, channels >= 1")
    images = np.full((count, channels, side, side), 0.5, dtype=np.float32)
    labels = np.zeros(count, dtype=np.int64)
    return Dataset(images, labels)


def _record_size(variant: str) -> int:
    if variant not in _VARIANTS:
        raise ValueError(f"variant must be one of {sorted(_VARIANTS)}, got {variant!r}")
    return _VARIANTS[variant][0] + _IMAGE_BYTES


def load_cifar(path, variant: str = "cifar10") -> Dataset:
    """Parse a CIFAR binary batch file; see the module docstring for layout."""
    rec = _record_size(variant)
    label_bytes, fine_range, coarse_range = _VARIANTS[variant]
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such file: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % rec != 0:
        full = raw.size // rec
        raise ValueError(
            f"{path}: {raw.size} bytes is not a multiple of the {rec}-byte "
            f"{variant} record; {full} complete records, then {raw.size % rec} "
            f"trailing bytes starting at offset {full * rec}")
    n = raw.size // rec
    recs = raw.reshape(n, rec)

    fine = recs[:, label_bytes - 1].astype(np.int64)
    bad = np.flatnonzero(fine >= fine_range)
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"{path}: record {i} has label {fine[i]} >= {fine_range} "
                         f"(byte offset {i * rec + label_bytes - 1})")
    coarse = None
    if coarse_range is not None:
        coarse = recs[:, 0].astype(np.int64)
        bad = np.flatnonzero(coarse >= coarse_range)
        if bad.size:
            i = int(bad[0])
            raise ValueError(f"{path}: record {i} has coarse label {coarse[i]} "
                             f">= {coarse_range} (byte offset {i * rec})")

    planes = recs[:, label_bytes:].reshape(n, 3, CIFAR_SIDE, CIFAR_SIDE)
    images = planes.astype(np.float32) / np.float32(255.0)
    return Dataset(images, fine, coarse)


def save_cifar(path, dataset: Dataset, variant: str = "cifar10"):
    rec = _record_size(variant)
    label_bytes, fine_range, coarse_range = _VARIANTS[variant]
    n = len(dataset)
    if dataset.images.shape[1:] != (3, CIFAR_SIDE, CIFAR_SIDE):
        raise ValueError(f"expected (N, 3, {CIFAR_SIDE}, {CIFAR_SIDE}) images, "
                         f"got {dataset.images.shape}")
    if n and dataset.labels.max() >= fine_range:
        raise ValueError(f"labels exceed the {variant} range {fine_range}")

    out = np.empty((n, rec), dtype=np.uint8)
    if coarse_range is not None:
        coarse = dataset.coarse_labels
        if coarse is None:
            raise ValueError(f"{variant} needs coarse_labels to write records")
        if n and coarse.max() >= coarse_range:
            raise ValueError(f"coarse labels exceed the range {coarse_range}")
        out[:, 0] = coarse
    out[:, label_bytes - 1] = dataset.labels
    quant = np.rint(dataset.images.astype(np.float64) * 255.0)
    out[:, label_bytes:] = quant.astype(np.uint8).reshape(n, _IMAGE_BYTES)
    out.tofile(path)
