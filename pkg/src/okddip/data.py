"""Datasets: a synthetic Gaussian mixture plus IDX and CIFAR-10 binary readers."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


class DataFormatError(ValueError):
    """Base class for malformed dataset files."""


class BadMagicError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # [n, ...]; channel axis is 1 for images, features for vectors
    labels: np.ndarray  # int64 [n]
    num_classes: int
    split: str = "train"
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise CountMismatchError(f"{len(self.inputs)} inputs vs {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    @property
    def is_image(self) -> bool:
        return self.inputs.ndim == 4


# --- normalization ----------------------------------------------------------

def channel_stats(inputs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std over every axis except axis 1."""
    if len(inputs) == 0:
        c = inputs.shape[1] if inputs.ndim > 1 else 1
        return np.zeros(c), np.ones(c)
    axes = tuple(i for i in range(inputs.ndim) if i != 1)
    mean = inputs.mean(axis=axes)
    std = inputs.std(axis=axes)
    return mean, np.where(std > 0, std, 1.0)


def normalize(inputs: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    shape = [1] * inputs.ndim
    shape[1] = -1
    return (inputs - mean.reshape(shape)) / std.reshape(shape)


def _finish(raw: np.ndarray, labels: np.ndarray, num_classes: int, split: str, stats) -> Dataset:
    mean, std = channel_stats(raw) if stats is None else stats
    return Dataset(normalize(raw, mean, std), labels.astype(np.int64), num_classes, split, mean, std)


# --- synthetic ---------------------------------------------------------------

def synth_gaussian_mixture(
    num_classes: int,
    samples_per_class: int,
    input_dim: int,
    class_separation: float,
    seed: int,
    test_fraction: float = 0.2,
) -> tuple[Dataset, Dataset]:
    """Isotropic unit-variance Gaussians centred on random unit directions times ``class_separation``.

    Each class is split deterministically, the last ``test_fraction`` of its
    samples going to the test set; both splits are normalized with the
    training statistics.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if not class_separation > 0:
        raise ValueError("class_separation must be positive")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((num_classes, input_dim))
    centers *= class_separation / np.linalg.norm(centers, axis=1, keepdims=True)
    n_test = int(round(samples_per_class * test_fraction))
    tr_x, tr_y, te_x, te_y = [], [], [], []
    for c in range(num_classes):
        x = centers[c] + rng.standard_normal((samples_per_class, input_dim))
        tr_x.append(x[: samples_per_class - n_test])
        te_x.append(x[samples_per_class - n_test:])
        tr_y.append(np.full(samples_per_class - n_test, c))
        te_y.append(np.full(n_test, c))
    train_raw, test_raw = np.concatenate(tr_x), np.concatenate(te_x)
    train = _finish(train_raw, np.concatenate(tr_y), num_classes, "train", None)
    test = _finish(test_raw, np.concatenate(te_y), num_classes, "test", (train.mean, train.std))
    return train, test


# --- IDX -----------------------------------------------------------------------

def read_idx(path: str | Path) -> np.ndarray:
    """Read an unsigned-byte IDX file (images 0x803 or labels 0x801)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes, too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_LABELS_MAGIC:
        ndim = 1
    elif magic == IDX_IMAGES_MAGIC:
        ndim = 3
    else:
        raise BadMagicError(f"{path}: bad IDX magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: header needs {header} bytes, file has {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    payload = raw[header:]
    if len(payload) < expected:
        raise TruncatedFileError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=np.uint8, count=expected).reshape(dims)


def load_idx(
    images_path: str | Path,
    labels_path: str | Path,
    num_classes: int = 10,
    split: str = "train",
    stats: tuple[np.ndarray, np.ndarray] | None = None,
) -> Dataset:
    """Images as [n, 1, rows, cols] scaled to [0, 1], then channel-normalized."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise BadMagicError(f"{images_path}: expected an image file")
    if labels.ndim != 1:
        raise BadMagicError(f"{labels_path}: expected a label file")
    if len(images) != len(labels):
        raise CountMismatchError(f"{len(images)} images vs {len(labels)} labels")
    raw = images[:, None, :, :].astype(np.float64) / 255.0
    return _finish(raw, labels, num_classes, split, stats)


def write_idx(path: str | Path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    magic = {1: IDX_LABELS_MAGIC, 3: IDX_IMAGES_MAGIC}.get(array.ndim)
    if magic is None:
        raise ValueError(f"IDX writer handles 1-d labels or 3-d images, got {array.ndim}-d")
    with open(path, "wb") as fh:
        fh.write(struct.pack(f">I{array.ndim}I", magic, *array.shape))
        fh.write(array.tobytes())


# --- CIFAR-10 binary -------------------------------------------------------------

def read_cifar_binary(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        raise DataFormatError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    return records[:, 1:].reshape(-1, 3, 32, 32), records[:, 0].astype(np.int64)


def load_cifar_binary(
    path: str | Path, split: str = "train", stats: tuple[np.ndarray, np.ndarray] | None = None
) -> Dataset:
    pixels, labels = read_cifar_binary(path)
    return _finish(pixels.astype(np.float64) / 255.0, labels, 10, split, stats)


def write_cifar_binary(path: str | Path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), -1)
    out = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    Path(path).write_bytes(out.tobytes())


# --- augmentation and batching ------------------------------------------------------

PAD = 4


def pad_crop(image: np.ndarray, top: int, left: int, pad: int = PAD) -> np.ndarray:
    """Zero-pad by ``pad`` on each side, then crop the original size at (top, left)."""
    _, h, w = image.shape
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)))
    return padded[:, top:top + h, left:left + w]


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, :, ::-1]


def augment_batch(images: np.ndarray, seed: int, epoch: int = 0, indices=None) -> np.ndarray:
    """Pad-4 random crop plus a coin-flip horizontal mirror, per image.

    Randomness is keyed on (seed, epoch, dataset index) so a replay gives the
    same batch regardless of batch composition.
    """
    if images.ndim != 4 or images.shape[2] < 8 or images.shape[3] < 8:
        raise ValueError(f"augment_batch needs [b, C, H>=8, W>=8], got {images.shape}")
    if indices is None:
        indices = range(len(images))
    out = np.empty_like(images)
    for k, (img, idx) in enumerate(zip(images, indices)):
        rng = np.random.default_rng([seed, epoch, int(idx)])
        top, left = rng.integers(0, 2 * PAD + 1, size=2)
        img = pad_crop(img, int(top), int(left))
        out[k] = hflip(img) if rng.random() < 0.5 else img
    return out


def batch_indices(n: int, batch_size: int, shuffle_seed: int, epoch: int) -> list[np.ndarray]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng([shuffle_seed, epoch]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def batch_iter(
    dataset: Dataset, batch_size: int, shuffle_seed: int, epoch: int, augment: bool = False
) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield (inputs, labels, indices) for a seeded permutation; the short tail batch is kept."""
    for idx in batch_indices(len(dataset), batch_size, shuffle_seed, epoch):
        x = dataset.inputs[idx]
        if augment:
            x = augment_batch(x, shuffle_seed, epoch, idx)
        yield x, dataset.labels[idx], idx
