"""Desk-scale datasets and deterministic drop-last batching."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataFormatError

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CACHE_MAGIC = b"MMKDDATA"
CACHE_VERSION = 1

# Nearest-center (Bayes) accuracy is about 85% for C=10, n_in=32 and the
# default data seed; tests/test_data.py holds the Monte-Carlo check.
DEFAULT_SPREAD = 2.1


@dataclass
class Dataset:
    inputs: np.ndarray  # float32 [N, n_in]
    labels: np.ndarray  # int64 [N]
    num_classes: int
    split: str = "train"
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    ids: np.ndarray | None = None

    def __post_init__(self):
        if len(self.inputs) == 0:
            raise ConfigError("empty dataset")
        if len(self.inputs) != len(self.labels):
            raise ConfigError("inputs and labels differ in length")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ConfigError("labels out of range [0, C)")
        if self.ids is None:
            self.ids = np.arange(len(self.labels), dtype=np.int64)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_in(self) -> int:
        return self.inputs.shape[1]


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def blob_centers(num_classes: int, n_in: int, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, 0]).standard_normal((num_classes, n_in))


def make_blobs(num_classes: int = 10, per_class: int = 600, n_in: int = 32,
               spread: float = DEFAULT_SPREAD, seed: int = 0,
               normalize: bool = True) -> tuple[Dataset, Dataset]:
    """Isotropic Gaussian blobs around random centers, split 80/20 per class.

    Inputs are standardized with train-split statistics when ``normalize``.
    """
    if num_classes < 2:
        raise ConfigError("need at least two classes")
    centers = blob_centers(num_classes, n_in, seed)
    rng = np.random.default_rng([seed, 1])
    n_train = int(round(0.8 * per_class))
    tr_x, tr_y, te_x, te_y = [], [], [], []
    for c in range(num_classes):
        x = centers[c] + spread * rng.standard_normal((per_class, n_in))
        tr_x.append(x[:n_train]); tr_y.append(np.full(n_train, c))
        te_x.append(x[n_train:]); te_y.append(np.full(per_class - n_train, c))
    train_x, test_x = np.concatenate(tr_x), np.concatenate(te_x)
    mean = std = None
    if normalize:
        mean = train_x.mean(0)
        std = train_x.std(0)
        std[std == 0] = 1.0
        train_x, test_x = (train_x - mean) / std, (test_x - mean) / std
    train = Dataset(train_x.astype(np.float32), np.concatenate(tr_y).astype(np.int64), num_classes,
                    "train", mean, std)
    test = Dataset(test_x.astype(np.float32), np.concatenate(te_y).astype(np.int64), num_classes,
                   "test", mean, std)
    return train, test


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int
    seed: int = 0
    drop_last: bool = True

    def __post_init__(self):
        if not self.drop_last:
            raise ConfigError("batching is always drop-last (the feature head needs a constant batch size)")
        if self.batch_size < 1:
            raise ConfigError("batch size must be positive")

    def num_batches(self, n: int) -> int:
        return n // self.batch_size


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 7]).permutation(n)


def batches(dataset: Dataset, plan: BatchPlan, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(inputs, one_hot_labels, sample_ids)`` for one epoch."""
    n, b = len(dataset), plan.batch_size
    if b > n:
        raise ConfigError(f"batch size {b} exceeds dataset size {n}")
    perm = epoch_permutation(n, plan.seed, epoch)
    for i in range(plan.num_batches(n)):
        idx = perm[i * b:(i + 1) * b]
        yield (dataset.inputs[idx], one_hot(dataset.labels[idx], dataset.num_classes),
               dataset.ids[idx])


# -- IDX files ------------------------------------------------------------------

def read_idx(path: str | Path) -> np.ndarray:
    """Parse an unsigned-byte IDX file (images 0x803 or labels 0x801)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated header at byte offset {len(raw)}")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x} at byte offset 0")
    ndim = magic & 0xFF
    end = 4 + 4 * ndim
    if len(raw) < end:
        raise DataFormatError(f"{path}: truncated dimension header at byte offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:end])
    count = int(np.prod(dims))
    if len(raw) < end + count:
        raise DataFormatError(f"{path}: truncated data at byte offset {len(raw)} "
                              f"(expected {end + count} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=end).reshape(dims)


def write_idx(path: str | Path, array: np.ndarray) -> Path:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ConfigError("IDX writer supports uint8 arrays only")
    if array.ndim == 1:
        magic = IDX_LABELS
    elif array.ndim == 3:
        magic = IDX_IMAGES
    else:
        raise ConfigError("IDX arrays must be 1-d labels or 3-d images")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())
    return path


def load_idx(images_path: str | Path, labels_path: str | Path, num_classes: int | None = None,
             split: str = "train") -> Dataset:
    images = read_idx(images_path)
    labels = read_idx(labels_path).astype(np.int64)
    if images.ndim != 3 or labels.ndim != 1:
        raise DataFormatError(f"{images_path}: expected an image file and a label file")
    if len(images) != len(labels):
        raise DataFormatError(f"{images_path}: {len(images)} images but {len(labels)} labels")
    x = images.reshape(len(images), -1).astype(np.float32) / 255.0
    c = num_classes or int(labels.max()) + 1
    return Dataset(x, labels, c, split)


def data_dir(override: str | Path | None = None) -> Path:
    return Path(override or os.environ.get("MMKD_DATA_DIR", "data"))


# -- dataset cache ----------------------------------------------------------------

def save_dataset(path: str | Path, ds: Dataset) -> Path:
    """Header {magic, version, N, n_in, C}, then float32 inputs and int32 labels (LE)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<IIII", CACHE_VERSION, len(ds), ds.n_in, ds.num_classes))
        fh.write(ds.inputs.astype("<f4").tobytes())
        fh.write(ds.labels.astype("<i4").tobytes())
    return path


def load_dataset(path: str | Path, split: str = "train") -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:8] != CACHE_MAGIC:
        raise DataFormatError(f"{path}: bad magic at byte offset 0")
    version, n, n_in, c = struct.unpack("<IIII", raw[8:24])
    if version != CACHE_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version} at byte offset 8")
    need = 24 + 4 * n * n_in + 4 * n
    if len(raw) < need:
        raise DataFormatError(f"{path}: truncated data at byte offset {len(raw)}")
    x = np.frombuffer(raw, dtype="<f4", count=n * n_in, offset=24).reshape(n, n_in)
    y = np.frombuffer(raw, dtype="<i4", count=n, offset=24 + 4 * n * n_in)
    return Dataset(x.astype(np.float32), y.astype(np.int64), c, split)
