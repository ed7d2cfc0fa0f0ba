"""Synthetic datasets, IDX ingestion, splits and minibatch sampling."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass

import numpy as np

from autodiff import RngStream
from errors import ConfigError, DataFormatError
from utils.data_utils import read_idx_pair, write_idx_pair

logger = logging.getLogger(__name__)

GENERATORS = ("two-moons", "spirals", "gaussian-blobs", "stripes")
SPLIT_NAMES = ("train", "val", "test")


def _readonly(array):
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Dataset:
    """N examples of dimension D with a train/val/test partition of ``[0, N)``."""

    inputs: np.ndarray
    labels: np.ndarray
    splits: dict
    provenance: str
    num_classes: int = 0
    image_side: int = 0

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        if inputs.ndim != 2 or inputs.shape[0] < 1 or inputs.shape[1] < 1:
            raise DataFormatError(f"inputs must be an (N>=1, D>=1) matrix, got {inputs.shape}")
        if len(self.labels) != inputs.shape[0]:
            raise DataFormatError(f"{len(self.labels)} labels for {inputs.shape[0]} inputs")
        seen = np.zeros(inputs.shape[0], dtype=np.int64)
        splits = {}
        for name, indices in self.splits.items():
            indices = np.sort(np.asarray(indices, dtype=np.int64))
            if indices.size and (indices[0] < 0 or indices[-1] >= inputs.shape[0]):
                raise DataFormatError(f"split {name!r} indexes outside [0, {inputs.shape[0]})")
            seen[indices] += 1
            splits[name] = _readonly(indices)
        if np.any(seen != 1):
            raise DataFormatError("splits must partition the dataset exactly")
        object.__setattr__(self, "inputs", _readonly(inputs))
        object.__setattr__(self, "labels", _readonly(self.labels))
        object.__setattr__(self, "splits", splits)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def split_indices(self, split) -> np.ndarray:
        try:
            return self.splits[split]
        except KeyError:
            raise ConfigError(f"unknown split {split!r}; have {sorted(self.splits)}") from None

    def full_batch(self, split) -> "Minibatch":
        return Minibatch(self, split, self.split_indices(split))

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        digest.update(self.inputs.tobytes())
        digest.update(np.ascontiguousarray(self.labels).tobytes())
        for name in sorted(self.splits):
            digest.update(name.encode())
            digest.update(self.splits[name].tobytes())
        return digest.hexdigest()


@dataclass(frozen=True, eq=False)
class Minibatch:
    dataset: Dataset
    split: str
    indices: np.ndarray

    def __post_init__(self):
        indices = np.asarray(self.indices, dtype=np.int64)
        if indices.size == 0:
            raise ConfigError("a minibatch needs at least one example")
        if not np.all(np.isin(indices, self.dataset.split_indices(self.split))):
            raise ConfigError(f"minibatch indices fall outside split {self.split!r}")
        object.__setattr__(self, "indices", indices)

    @property
    def size(self) -> int:
        return int(self.indices.size)

    @property
    def inputs(self) -> np.ndarray:
        return self.dataset.inputs[self.indices]

    @property
    def targets(self) -> np.ndarray:
        return self.dataset.labels[self.indices]


def split_sizes(n):
    """70/15/15 by floor, with validation and test raised to at least one example."""
    train = int(math.floor(0.7 * n))
    val = max(1, int(math.floor(0.15 * n)))
    test = n - train - val
    if test < 1:
        train -= 1 - test
        test = 1
    return train, val, test


def _shuffled_splits(n, rng: RngStream):
    order = rng.child("split").generator().permutation(n)
    train, val, _ = split_sizes(n)
    return {
        "train": order[:train],
        "val": order[train:train + val],
        "test": order[train + val:],
    }


def _two_moons(n, generator):
    n_outer = (n + 1) // 2
    n_inner = n - n_outer
    t_outer = np.linspace(0.0, math.pi, n_outer)
    t_inner = np.linspace(0.0, math.pi, n_inner)
    outer = np.column_stack([np.cos(t_outer), np.sin(t_outer)])
    inner = np.column_stack([1.0 - np.cos(t_inner), 1.0 - np.sin(t_inner) - 0.5])
    labels = np.concatenate([np.zeros(n_outer, np.int64), np.ones(n_inner, np.int64)])
    return np.vstack([outer, inner]), labels, 2


def _spirals(n, generator):
    counts = [(n + 1) // 2, n // 2]
    points, labels = [], []
    for cls, count in enumerate(counts):
        t = np.linspace(0.5, 3.0 * math.pi, count)
        angle = t + cls * math.pi
        points.append(np.column_stack([t * np.cos(angle), t * np.sin(angle)]) / (3.0 * math.pi))
        labels.append(np.full(count, cls, np.int64))
    return np.vstack(points), np.concatenate(labels), 2


def _blobs(n, generator, classes):
    angles = 2.0 * math.pi * np.arange(classes) / classes
    centers = 4.0 * np.column_stack([np.cos(angles), np.sin(angles)])
    labels = np.arange(n, dtype=np.int64) % classes
    return centers[labels].copy(), labels, classes


def _stripes(n, generator, side):
    labels = np.arange(n, dtype=np.int64) % 2
    positions = generator.integers(0, side, size=n)
    images = np.zeros((n, side, side))
    for i, (label, pos) in enumerate(zip(labels, positions)):
        if label == 0:
            images[i, pos, :] = 1.0
        else:
            images[i, :, pos] = 1.0
    return images.reshape(n, side * side), labels, 2


def generate(kind, n, noise=0.0, seed=0, classes=3, side=8) -> Dataset:
    """Deterministic synthetic dataset with a seeded 70/15/15 split."""
    if kind not in GENERATORS:
        raise ConfigError(f"unknown dataset {kind!r}; expected one of {GENERATORS}")
    if n < 4:
        raise ConfigError(f"need n >= 4 examples, got {n}")
    if noise < 0:
        raise ConfigError(f"noise must be non-negative, got {noise}")
    rng = RngStream(seed).child("data")
    generator = rng.generator()
    if kind == "two-moons":
        inputs, labels, num_classes = _two_moons(n, generator)
    elif kind == "spirals":
        inputs, labels, num_classes = _spirals(n, generator)
    elif kind == "gaussian-blobs":
        if classes < 2:
            raise ConfigError("gaussian-blobs needs at least two classes")
        inputs, labels, num_classes = _blobs(n, generator, classes)
    else:
        if side < 2:
            raise ConfigError("stripes needs side >= 2")
        inputs, labels, num_classes = _stripes(n, generator, side)
    if noise > 0:
        inputs = inputs + noise * rng.child("noise").generator().standard_normal(inputs.shape)
    dataset = Dataset(
        inputs,
        labels,
        _shuffled_splits(n, rng),
        provenance=f"{kind}(n={n}, noise={noise!r}, seed={seed})",
        num_classes=num_classes,
        image_side=side if kind == "stripes" else 0,
    )
    logger.debug("generated %s", dataset.provenance)
    return dataset


def placeholder(n) -> Dataset:
    """``n`` training rows of zeros (plus one val and one test row) for analytic losses."""
    if n < 1:
        raise ConfigError("placeholder datasets need n >= 1")
    total = n + 2
    return Dataset(
        np.zeros((total, 1)),
        np.zeros(total, dtype=np.int64),
        {"train": np.arange(n), "val": [n], "test": [n + 1]},
        provenance=f"placeholder(n={n})",
    )


def load_idx(images_path, labels_path, seed=0) -> Dataset:
    """IDX image/label pair scaled to [0, 1], split 70/15/15 by ``seed``."""
    images, labels = read_idx_pair(images_path, labels_path)
    n, rows, cols = images.shape
    dataset = Dataset(
        images.reshape(n, rows * cols).astype(np.float64) / 255.0,
        labels.astype(np.int64),
        _shuffled_splits(n, RngStream(seed).child("idx")),
        provenance=str(images_path),
        num_classes=int(labels.max()) + 1 if n else 0,
        image_side=rows if rows == cols else 0,
    )
    logger.info("loaded %d images of %dx%d from %s", n, rows, cols, images_path)
    return dataset


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Write an image dataset back to IDX, quantizing pixels to bytes."""
    side = dataset.image_side
    if not side:
        raise DataFormatError("only square image datasets can be written as IDX")
    pixels = np.clip(np.rint(dataset.inputs * 255.0), 0, 255).astype(np.uint8)
    write_idx_pair(images_path, labels_path,
                   pixels.reshape(dataset.n, side, side),
                   dataset.labels)


def sample_batches(dataset: Dataset, split, batch_size, rng: RngStream, epoch) -> list:
    """One epoch of shuffled-without-replacement minibatches; the last one may be short.

    The order is drawn from ``rng.child("batches")``, so runs that share a seed but not a
    stream visit the data in different orders.
    """
    indices = dataset.split_indices(split)
    if indices.size == 0:
        raise DataFormatError(f"split {split!r} is empty")
    if not 1 <= batch_size <= indices.size:
        raise ConfigError(f"batch size {batch_size} outside [1, {indices.size}]")
    generator = rng.child("batches").child(epoch).generator()
    order = generator.permutation(indices)
    return [
        Minibatch(dataset, split, order[start:start + batch_size])
        for start in range(0, order.size, batch_size)
    ]
