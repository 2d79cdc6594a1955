"""Dataset ingestion: seeded synthetic generator, IDX files, and CSV.

The synthetic generator draws one Gaussian centroid image per class and
renders each sample as its class centroid plus i.i.d. Gaussian pixel noise,
which makes dataset difficulty a single knob and keeps the whole pipeline
self-contained and reproducible.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DataFormatError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class DatasetSpec:
    """Where training data comes from and how it is normalized."""

    format: str = "synthetic"  # synthetic | idx | csv
    classes: int = 10
    train_samples: int = 5000
    eval_samples: int = 1000
    shape: tuple = (1, 16, 16)
    noise: float = 1.5
    seed: int = 0
    mean: float = 0.0
    std: float = 1.0
    train_images: str = ""
    train_labels: str = ""
    eval_images: str = ""
    eval_labels: str = ""
    train_csv: str = ""
    eval_csv: str = ""

    def __post_init__(self):
        if self.format not in ("synthetic", "idx", "csv"):
            raise DataFormatError(f"unknown dataset format '{self.format}'")
        if self.std == 0.0:
            raise DataFormatError("normalization std must be non-zero")


class Dataset:
    """In-memory image/label store with deterministic batch iteration."""

    def __init__(self, images: np.ndarray, labels: np.ndarray, classes: int):
        images = np.ascontiguousarray(images, dtype=np.float64)
        labels = np.ascontiguousarray(labels, dtype=np.int64)
        if images.ndim != 4 or images.shape[0] != labels.shape[0]:
            raise DataFormatError(
                f"images {images.shape} and labels {labels.shape} do not align"
            )
        if labels.size and (labels.min() < 0 or labels.max() >= classes):
            raise DataFormatError(
                f"label outside [0, {classes}): span [{labels.min()}, {labels.max()}]"
            )
        self.images = images
        self.labels = labels
        self.classes = classes

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def shape(self) -> tuple:
        return self.images.shape[1:]

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None):
        """Yield (images, labels) arrays; shuffled when an rng is given."""
        n = len(self)
        order = np.arange(n)
        if rng is not None:
            rng.shuffle(order)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            yield self.images[idx], self.labels[idx]


def synthetic_dataset(spec: DatasetSpec):
    """Deterministic class-centroid images with additive noise.

    Returns (train, eval) datasets drawn from one centroid set; labels
    cycle round-robin so classes stay balanced.
    """
    rng = np.random.default_rng(spec.seed)
    k = spec.classes
    centroids = rng.normal(0.0, 1.0, size=(k,) + tuple(spec.shape))

    def draw(n):
        labels = np.arange(n) % k
        images = centroids[labels] + spec.noise * rng.normal(size=(n,) + tuple(spec.shape))
        return Dataset(images, labels, k)

    return draw(spec.train_samples), draw(spec.eval_samples)


def synthetic_centroids(spec: DatasetSpec) -> np.ndarray:
    """The exact centroid set a given spec generates (for oracle checks)."""
    rng = np.random.default_rng(spec.seed)
    return rng.normal(0.0, 1.0, size=(spec.classes,) + tuple(spec.shape))


def _open_maybe_gzip(path: str):
    if path.endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def load_idx_images(path: str) -> np.ndarray:
    """Classic big-endian IDX image file -> [n, 1, rows, cols] in [0, 1]."""
    with _open_maybe_gzip(path) as f:
        header = f.read(16)
        if len(header) < 16:
            raise DataFormatError(f"{path}: truncated IDX header ({len(header)} bytes)")
        magic, n, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGE_MAGIC:
            raise DataFormatError(
                f"{path}: bad magic 0x{magic:08x} at offset 0 (expected 0x{IDX_IMAGE_MAGIC:08x})"
            )
        raw = f.read(n * rows * cols)
    if len(raw) != n * rows * cols:
        raise DataFormatError(f"{path}: truncated pixel data at offset {16 + len(raw)}")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, rows, cols)
    return images.astype(np.float64) / 255.0


def load_idx_labels(path: str) -> np.ndarray:
    with _open_maybe_gzip(path) as f:
        header = f.read(8)
        if len(header) < 8:
            raise DataFormatError(f"{path}: truncated IDX header ({len(header)} bytes)")
        magic, n = struct.unpack(">II", header)
        if magic != IDX_LABEL_MAGIC:
            raise DataFormatError(
                f"{path}: bad magic 0x{magic:08x} at offset 0 (expected 0x{IDX_LABEL_MAGIC:08x})"
            )
        raw = f.read(n)
    if len(raw) != n:
        raise DataFormatError(f"{path}: truncated label data at offset {8 + len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def load_csv(path: str, shape: tuple, classes: int) -> Dataset:
    """CSV rows of label,pixel,pixel,... reshaped to the declared image shape."""
    table = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    if table.shape[1] != 1 + int(np.prod(shape)):
        raise DataFormatError(
            f"{path}: rows have {table.shape[1]} columns, expected 1+{int(np.prod(shape))}"
        )
    labels = table[:, 0].astype(np.int64)
    images = table[:, 1:].reshape((-1,) + tuple(shape))
    return Dataset(images, labels, classes)


def load_dataset(spec: DatasetSpec):
    """Build (train, eval) datasets per the spec, normalized in place."""
    if spec.format == "synthetic":
        train, evl = synthetic_dataset(spec)
    elif spec.format == "idx":
        train = Dataset(load_idx_images(spec.train_images),
                        load_idx_labels(spec.train_labels), spec.classes)
        evl = Dataset(load_idx_images(spec.eval_images),
                      load_idx_labels(spec.eval_labels), spec.classes)
    else:
        train = load_csv(spec.train_csv, spec.shape, spec.classes)
        evl = load_csv(spec.eval_csv, spec.shape, spec.classes)

    if spec.mean != 0.0 or spec.std != 1.0:
        for ds in (train, evl):
            ds.images -= spec.mean
            ds.images /= spec.std
    if train.shape != evl.shape:
        raise DataFormatError(f"train shape {train.shape} != eval shape {evl.shape}")
    return train, evl


def hflip(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Randomly mirror each image horizontally (seeded, out of place)."""
    flips = rng.random(images.shape[0]) < 0.5
    out = images.copy()
    out[flips] = out[flips, :, :, ::-1]
    return out
