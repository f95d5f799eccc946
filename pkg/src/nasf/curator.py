"""Datasets, worker shards and batch samplers.

CIFAR-10 binary batches are read as-is: each record is one label byte followed
by 3072 pixel bytes (R, G, B planes of 32x32, row-major). Pixels are scaled to
[0, 1] with no further normalization.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR10_CLASSES = ["airplane", "automobile", "bird", "cat", "deer",
                   "dog", "frog", "horse", "ship", "truck"]
CIFAR10_SHAPE = (3, 32, 32)
CIFAR10_RECORD = 1 + 3 * 32 * 32
CIFAR10_RECORDS_PER_FILE = 10000
CIFAR10_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST_FILES = ["test_batch.bin"]


class LoadError(OSError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...]

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ValueError(f"images must be [N,C,H,W], got shape {images.shape}")
        if len(images) < 1 or len(images) != len(labels):
            raise ValueError("dataset needs at least one image and one label per image")
        if labels.min() < 0 or labels.max() >= len(self.class_names):
            raise ValueError("labels must index into class_names")
        if not np.isfinite(images).all():
            raise ValueError("images must be finite")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_names", tuple(self.class_names))

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def classes(self) -> int:
        return len(self.class_names)

    def subset(self, n: int | None) -> "Dataset":
        """The first ``n`` examples (all of them for ``None``)."""
        if n is None or n >= len(self):
            return self
        if n < 1:
            raise ConfigurationError("subset size must be >= 1")
        return Dataset(self.images[:n], self.labels[:n], self.class_names)

    def take(self, indices) -> tuple[np.ndarray, np.ndarray]:
        indices = np.asarray(indices, dtype=np.int64)
        return self.images[indices], self.labels[indices]


@dataclass(frozen=True)
class Shard:
    rank: int
    world_size: int
    indices: np.ndarray

    def __len__(self):
        return len(self.indices)


# --------------------------------------------------------------------------
# loading
# --------------------------------------------------------------------------

def _read_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if not path.is_file():
        raise LoadError(f"{path}: missing CIFAR-10 batch file")
    expected = CIFAR10_RECORD * CIFAR10_RECORDS_PER_FILE
    size = path.stat().st_size
    if size != expected:
        raise LoadError(f"{path}: expected {expected} bytes, found {size}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size != expected:
        raise LoadError(f"{path}: short read ({raw.size} of {expected} bytes)")
    records = raw.reshape(CIFAR10_RECORDS_PER_FILE, CIFAR10_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise LoadError(f"{path}: record {bad} has label byte {labels[bad]} > 9")
    images = records[:, 1:].reshape(-1, *CIFAR10_SHAPE).astype(np.float64) / 255.0
    return images, labels


def _load_files(directory: Path, names: list[str]) -> Dataset:
    parts = [_read_cifar_file(directory / name) for name in names]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return Dataset(images, labels, CIFAR10_CLASSES)


def load_cifar10(directory) -> tuple[Dataset, Dataset]:
    """Read the five training batches and the test batch from ``directory``."""
    directory = Path(directory)
    # some archives unpack into a subdirectory
    if not (directory / CIFAR10_TEST_FILES[0]).exists() and (directory / "cifar-10-batches-bin").is_dir():
        directory = directory / "cifar-10-batches-bin"
    return _load_files(directory, CIFAR10_TRAIN_FILES), _load_files(directory, CIFAR10_TEST_FILES)


def write_cifar_file(path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write images in [0, 1] and labels in the CIFAR-10 binary record layout."""
    images = np.asarray(images)
    if images.shape[1:] != CIFAR10_SHAPE:
        raise ValueError(f"CIFAR-10 records hold {CIFAR10_SHAPE} images, got {images.shape[1:]}")
    pixels = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8).reshape(len(images), -1)
    records = np.empty((len(images), CIFAR10_RECORD), dtype=np.uint8)
    records[:, 0] = np.asarray(labels, dtype=np.uint8)
    records[:, 1:] = pixels
    tmp = f"{path}.tmp"
    records.tofile(tmp)
    os.replace(tmp, path)


def cifar10_present(directory) -> bool:
    if directory is None:
        return False
    directory = Path(directory)
    candidates = [directory, directory / "cifar-10-batches-bin"]
    return any(all((d / n).is_file() for n in CIFAR10_TRAIN_FILES + CIFAR10_TEST_FILES)
               for d in candidates)


def synthetic_dataset(seed: int, n_train: int, n_test: int, classes: int,
                      shape=(3, 8, 8), noise: float = 0.1) -> tuple[Dataset, Dataset]:
    """Class-conditional blobs: a fixed random pattern per class plus noise.

    Labels cycle through the classes before shuffling, so class counts differ
    by at most one in each split.
    """
    if classes < 2:
        raise ConfigurationError("synthetic data needs at least two classes")
    if n_train < 1 or n_test < 1:
        raise ConfigurationError("synthetic splits need at least one example each")
    shape = tuple(int(d) for d in shape)
    rng = np.random.default_rng(seed)
    means = rng.uniform(0.2, 0.8, size=(classes,) + shape)

    def split(n):
        labels = rng.permutation(np.arange(n) % classes)
        images = means[labels] + rng.normal(0.0, noise, size=(n,) + shape)
        return Dataset(images, labels, [f"class_{i}" for i in range(classes)])

    return split(n_train), split(n_test)


# --------------------------------------------------------------------------
# sharding and sampling
# --------------------------------------------------------------------------

def shard_indices(n: int, rank: int, world_size: int) -> np.ndarray:
    if world_size < 1 or not 0 <= rank < world_size:
        raise ConfigurationError(f"rank {rank} outside world of size {world_size}")
    if world_size > n:
        raise ConfigurationError(f"cannot shard {n} examples over {world_size} workers")
    return np.arange(rank, n, world_size, dtype=np.int64)


def shard(dataset: Dataset, rank: int, world_size: int) -> Shard:
    """Round-robin assignment: rank r owns indices i with i % world_size == r."""
    return Shard(rank, world_size, shard_indices(len(dataset), rank, world_size))


def _batch_ranges(n: int, batch_size: int):
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    for start in range(0, n, batch_size):
        yield start, min(start + batch_size, n)


def batches(dataset: Dataset, part: Shard, batch_size: int, epoch_seed: int):
    """Shuffle a shard with a generator seeded by (epoch_seed, rank) and batch it.

    Full batches come first; a final partial batch carries the remainder.
    """
    rng = np.random.default_rng([epoch_seed, part.rank])
    order = part.indices[rng.permutation(len(part))]
    for lo, hi in _batch_ranges(len(order), batch_size):
        yield dataset.take(order[lo:hi])


def lockstep_batches(dataset: Dataset, batch_size: int, epoch_seed: int,
                     rank: int = 0, world_size: int = 1):
    """This rank's slice of each global batch for synchronous data parallelism.

    Every rank draws the same permutation of the whole dataset (seeded by
    ``epoch_seed`` only) and cuts it into global batches of ``batch_size``.
    Rank r keeps positions r, r+W, r+2W, ... of each global batch, so the
    union over ranks at every step is exactly the batch a single process would
    draw. Yields ``(images, labels, global_batch_len)``; a rank's slice may be
    empty when the last global batch is shorter than the world.
    """
    if world_size < 1 or not 0 <= rank < world_size:
        raise ConfigurationError(f"rank {rank} outside world of size {world_size}")
    rng = np.random.default_rng([epoch_seed])
    order = rng.permutation(len(dataset))
    for lo, hi in _batch_ranges(len(order), batch_size):
        mine = order[lo:hi][rank::world_size]
        images, labels = dataset.take(mine)
        yield images, labels, hi - lo
