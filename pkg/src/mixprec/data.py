"""Dataset ingestion: seeded synthetic blob datasets and IDX files.

Synthetic data comes in two flavors keyed by ``dims``: an integer gives
flat feature vectors with class centers spread on a circle (plus jitter),
a (C, H, W) triple gives image tensors built from smooth per-class
templates plus pixel noise. Both are linearly separable by construction
at the default settings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    """Where the data comes from and how it is split/normalized."""

    source: str                       # "synthetic" | "idx"
    classes: int = 0
    dims: object = None               # int (flat) or (C, H, W)
    samples: int = 0
    seed: int = 0
    noise: float = 1.0
    separation: float = 3.0           # center radius (flat) / template scale (image)
    val_fraction: float = 0.2
    images: str | None = None         # idx paths
    labels: str | None = None
    val_images: str | None = None
    val_labels: str | None = None
    mean: object = None               # normalization constants; None = standardize
    std: object = None

    def __post_init__(self):
        if self.source not in ("synthetic", "idx"):
            raise DataError(f"unknown dataset source {self.source!r}")
        if self.source == "synthetic":
            if self.classes < 2:
                raise DataError(f"synthetic data needs >= 2 classes, got {self.classes}")
            if self.samples < self.classes:
                raise DataError("synthetic data needs at least one sample per class")
            if not 0.0 < self.val_fraction < 1.0:
                raise DataError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        else:
            if not self.images or not self.labels:
                raise DataError("idx source needs 'images' and 'labels' paths")


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    num_classes: int

    @property
    def input_shape(self):
        return tuple(self.train_x.shape[1:])


def _upsample4(a):
    """Nearest-neighbor 4x upsampling of a (C, h, w) template."""
    return np.repeat(np.repeat(a, 4, axis=1), 4, axis=2)


def _synthetic_flat(spec, rng):
    k, d = spec.classes, int(spec.dims)
    if d < 2:
        raise DataError("flat synthetic data needs dims >= 2")
    theta0 = rng.uniform(0, 2 * math.pi)
    centers = np.zeros((k, d))
    for c in range(k):
        ang = theta0 + 2 * math.pi * c / k
        centers[c, 0] = math.cos(ang)
        centers[c, 1] = math.sin(ang)
    centers *= spec.separation
    centers += 0.05 * spec.separation * rng.standard_normal((k, d))
    return centers


def _synthetic_image(spec, rng):
    c, h, w = (int(v) for v in spec.dims)
    lo_h, lo_w = max(1, math.ceil(h / 4)), max(1, math.ceil(w / 4))
    centers = np.zeros((spec.classes, c, h, w))
    for cls in range(spec.classes):
        t = _upsample4(rng.standard_normal((c, lo_h, lo_w)))[:, :h, :w]
        centers[cls] = spec.separation * t / max(t.std(), 1e-9)
    return centers.reshape(spec.classes, -1)


def _generate_synthetic(spec: DatasetSpec):
    rng = np.random.default_rng(spec.seed)
    image = not np.isscalar(spec.dims)
    centers = _synthetic_image(spec, rng) if image else _synthetic_flat(spec, rng)
    n = spec.samples
    labels = np.arange(n, dtype=np.int64) % spec.classes
    rng.shuffle(labels)
    flat_dim = centers.shape[1]
    x = centers[labels] + spec.noise * rng.standard_normal((n, flat_dim))
    if image:
        x = x.reshape((n, *(int(v) for v in spec.dims)))
    else:
        x = x.reshape((n, int(spec.dims)))
    return x, labels, rng


def _normalize(spec, train_x, val_x):
    if spec.mean is None:
        mean = train_x.mean()
        std = max(float(train_x.std()), 1e-9)
    else:
        mean = np.asarray(spec.mean, dtype=float)
        std = np.asarray(spec.std if spec.std is not None else 1.0, dtype=float)
        if mean.ndim == 1:  # per-channel constants for image data
            mean = mean.reshape(1, -1, 1, 1)
            std = std.reshape(1, -1, 1, 1)
    return (train_x - mean) / std, (val_x - mean) / std


def load_dataset(spec: DatasetSpec) -> Dataset:
    if spec.source == "synthetic":
        x, y, rng = _generate_synthetic(spec)
        n_val = max(1, int(round(spec.val_fraction * spec.samples)))
        perm = rng.permutation(spec.samples)
        val_idx, train_idx = perm[:n_val], perm[n_val:]
        if len(train_idx) == 0:
            raise DataError("val_fraction leaves no training samples")
        train_x, val_x = _normalize(spec, x[train_idx], x[val_idx])
        return Dataset(train_x, y[train_idx], val_x, y[val_idx], spec.classes)
    return _load_idx_dataset(spec)


# --------------------------------------------------------------------------
# IDX format


_IDX_DTYPES = {
    0x08: np.dtype(np.uint8),
    0x09: np.dtype(np.int8),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def read_idx(path) -> np.ndarray:
    """Parse one IDX file (the classic magic-number tensor container)."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4:
        raise DataError(f"{path}: truncated IDX header at offset 0")
    if blob[0] != 0 or blob[1] != 0:
        raise DataError(f"{path}: bad IDX magic bytes {blob[:2]!r} at offset 0")
    code, ndim = blob[2], blob[3]
    if code not in _IDX_DTYPES:
        raise DataError(f"{path}: unknown IDX element code 0x{code:02x} at offset 2")
    if len(blob) < 4 + 4 * ndim:
        raise DataError(f"{path}: truncated IDX dimension table at offset 4")
    dims = [int.from_bytes(blob[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim)]
    dtype = _IDX_DTYPES[code]
    count = int(np.prod(dims)) if dims else 1
    start = 4 + 4 * ndim
    if len(blob) < start + count * dtype.itemsize:
        raise DataError(f"{path}: IDX payload truncated at offset {start}")
    return np.frombuffer(blob, dtype=dtype, count=count, offset=start).reshape(dims)


def _load_idx_pair(images_path, labels_path):
    images = read_idx(images_path).astype(np.float64)
    labels = read_idx(labels_path)
    if labels.ndim != 1:
        raise DataError(f"{labels_path}: labels must be rank 1, got rank {labels.ndim}")
    if images.shape[0] != labels.shape[0]:
        raise DataError(
            f"image count {images.shape[0]} != label count {labels.shape[0]}"
        )
    if images.ndim == 3:
        images = images[:, None, :, :]
    if images.ndim != 4:
        raise DataError(f"{images_path}: images must be rank 3 or 4, got rank {images.ndim}")
    if images.max() > 1.0:
        images = images / 255.0
    return images, labels.astype(np.int64)


def _load_idx_dataset(spec: DatasetSpec) -> Dataset:
    x, y = _load_idx_pair(spec.images, spec.labels)
    classes = spec.classes or int(y.max()) + 1
    if y.min() < 0 or y.max() >= classes:
        raise DataError(f"labels outside [0, {classes})")
    if spec.val_images:
        vx, vy = _load_idx_pair(spec.val_images, spec.val_labels)
    else:
        rng = np.random.default_rng(spec.seed)
        n_val = max(1, int(round(spec.val_fraction * len(y))))
        perm = rng.permutation(len(y))
        vx, vy = x[perm[:n_val]], y[perm[:n_val]]
        x, y = x[perm[n_val:]], y[perm[n_val:]]
    x, vx = _normalize(spec, x, vx)
    return Dataset(x, y, vx, vy, classes)
