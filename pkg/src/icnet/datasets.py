"""Deterministic data sources: XOR, synthetic blobs, MNIST (IDX) and CIFAR-10 (binary).

Images are returned channel-last ``(N, H, W, C)``, scaled to [0, 1] and then
standardized per channel with statistics taken from the training split only.
"""

import gzip
import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from icnet.ic_neuron import XOR_POINTS, XOR_TARGETS

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 32 * 32 * 3
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DataError(Exception):
    """Missing, truncated or malformed dataset files."""


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    split: str = "train"
    mean: np.ndarray = None
    std: np.ndarray = None
    augment: bool = False
    targets: np.ndarray = None

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise DataError(f"{len(self.x)} inputs but {len(self.y)} labels")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise DataError("labels outside [0, num_classes)")

    def __len__(self):
        return len(self.y)

    def astype(self, dtype):
        return replace(self, x=self.x.astype(dtype))

    def subset(self, n):
        return replace(self, x=self.x[:n], y=self.y[:n], targets=None if self.targets is None else self.targets[:n])


def channel_stats(x):
    axes = tuple(range(x.ndim - 1))
    mean = x.mean(axis=axes)
    std = x.std(axis=axes)
    return mean, np.where(std > 0, std, 1.0)


def standardize(train, test):
    """Standardize both splits with the training split's per-channel statistics."""
    mean, std = channel_stats(train.x)
    out = []
    for ds in (train, test):
        out.append(replace(ds, x=((ds.x - mean) / std).astype(ds.x.dtype), mean=mean, std=std))
    return tuple(out)


# -- IDX ---------------------------------------------------------------------


def parse_idx(blob, expected_magic=None):
    """Parse a big-endian IDX file of unsigned bytes into an array."""
    if len(blob) < 4:
        raise DataError("IDX file shorter than its magic number")
    (magic,) = struct.unpack(">I", blob[:4])
    if expected_magic is not None and magic != expected_magic:
        raise DataError(f"bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if magic >> 8 != 0x08:
        raise DataError(f"unsupported IDX type in magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise DataError("IDX header truncated")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    count = int(np.prod(dims)) if dims else 0
    if len(blob) - header != count:
        raise DataError(f"IDX payload has {len(blob) - header} bytes, header promises {count}")
    return np.frombuffer(blob, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(arr):
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    magic = 0x0800 | arr.ndim
    return struct.pack(f">I{arr.ndim}I", magic, *arr.shape) + arr.tobytes()


def _read(path):
    path = Path(path)
    candidates = [path, path.with_name(path.name + ".gz")]
    for p in candidates:
        if p.exists():
            data = p.read_bytes()
            return gzip.decompress(data) if p.suffix == ".gz" else data
    raise DataError(f"dataset file not found: {path}")


def load_mnist(directory, split="train"):
    """Read one MNIST split from ``directory``; pixels are scaled to [0, 1]."""
    img_name, lbl_name = MNIST_FILES[split]
    images = parse_idx(_read(Path(directory) / img_name), IDX_IMAGES_MAGIC)
    labels = parse_idx(_read(Path(directory) / lbl_name), IDX_LABELS_MAGIC)
    if images.ndim != 3:
        raise DataError(f"expected 3-D image array, got {images.ndim}-D")
    if len(images) != len(labels):
        raise DataError(f"{len(images)} images but {len(labels)} labels")
    x = (images.astype(np.float64) / 255.0)[..., None]
    return Dataset(x, labels.astype(np.int64), 10, split)


# -- CIFAR-10 ----------------------------------------------------------------


def parse_cifar_records(blob):
    """Split a CIFAR-10 binary batch into labels and ``(N, 32, 32, 3)`` uint8 images."""
    if len(blob) % CIFAR_RECORD:
        raise DataError(f"file length {len(blob)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if len(labels) and labels.max() > 9:
        raise DataError(f"label {labels.max()} out of range")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return labels, images


def write_cifar_records(labels, images):
    planar = np.ascontiguousarray(np.asarray(images, dtype=np.uint8).transpose(0, 3, 1, 2)).reshape(len(labels), -1)
    return np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], planar], axis=1).tobytes()


def _cifar_dir(directory):
    directory = Path(directory)
    nested = directory / "cifar-10-batches-bin"
    return nested if nested.is_dir() else directory


def load_cifar10_subset(directory, n_train=10000, seed=0, split="train"):
    """First ``n_train`` records of the seed-shuffled training batches, or the full test batch."""
    d = _cifar_dir(directory)
    if split == "test":
        labels, images = parse_cifar_records(_read(d / CIFAR_TEST_FILE))
    else:
        parts = [parse_cifar_records(_read(d / f)) for f in CIFAR_TRAIN_FILES]
        labels = np.concatenate([p[0] for p in parts])
        images = np.concatenate([p[1] for p in parts])
        order = np.random.default_rng([seed, 31337]).permutation(len(labels))[:n_train]
        labels, images = labels[order], images[order]
    return Dataset(images.astype(np.float64) / 255.0, labels, 10, split, augment=split == "train")


# -- synthetic -----------------------------------------------------------------


def make_xor():
    """The four XOR corners; label 1 marks the positive class {(0,0), (1,1)}."""
    y = (XOR_TARGETS > 0).astype(np.int64)
    return Dataset(XOR_POINTS.copy(), y, 2, "train", targets=XOR_TARGETS.copy())


def make_blobs(n, shape=(28, 28, 1), num_classes=10, seed=0, noise=1.0, split="train"):
    """Gaussian-noise images around smooth per-class prototypes.

    Prototypes depend only on ``(shape, num_classes)``, so train and test draws
    with different seeds share the same classes.
    """
    proto_rng = np.random.default_rng([len(shape), *shape, num_classes])
    h, w, c = shape
    coarse = proto_rng.normal(size=(num_classes, (h + 3) // 4, (w + 3) // 4, c))
    protos = np.repeat(np.repeat(coarse, 4, axis=1), 4, axis=2)[:, :h, :w, :]
    rng = np.random.default_rng([seed, 0 if split == "train" else 1])
    y = rng.integers(0, num_classes, n)
    x = protos[y] + noise * rng.normal(size=(n, h, w, c))
    return Dataset(x, y.astype(np.int64), num_classes, split)


# -- augmentation --------------------------------------------------------------


def augment_batch(x, seed, epoch, indices, pad=4):
    """Random crop after zero-padding by ``pad`` plus horizontal flip.

    Each sample's draws come from its own generator seeded with
    ``(seed, epoch, index)``, so they do not depend on batch composition.
    """
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    out = np.empty_like(x)
    for j, idx in enumerate(indices):
        rng = np.random.default_rng([seed, epoch, int(idx)])
        di, dj = rng.integers(0, 2 * pad + 1, size=2)
        img = xp[j, di:di + h, dj:dj + w, :]
        out[j] = img[:, ::-1, :] if rng.random() < 0.5 else img
    return out


def data_dir_default():
    return os.environ.get("IC_DATA_DIR", "")


def load_splits(name, directory=None, n_train=None, n_test=None, seed=0, dtype=np.float64):
    """Return standardized ``(train, test)`` for a named source."""
    directory = directory or data_dir_default()
    if name in ("mnist", "cifar10") and not directory:
        raise DataError(f"{name} needs a data directory (set data.dir or IC_DATA_DIR)")
    if name == "mnist":
        train, test = load_mnist(directory, "train"), load_mnist(directory, "test")
        if n_train:
            train = train.subset(n_train)
    elif name == "cifar10":
        train = load_cifar10_subset(directory, n_train or 10000, seed, "train")
        test = load_cifar10_subset(directory, split="test")
    elif name in ("blobs", "blobs-cifar"):
        shape = (28, 28, 1) if name == "blobs" else (32, 32, 3)
        train = make_blobs(n_train or 2000, shape, seed=seed, split="train")
        test = make_blobs(n_test or 500, shape, seed=seed, split="test")
        train.augment = name == "blobs-cifar"
    else:
        raise DataError(f"unknown dataset {name!r}")
    if n_test:
        test = test.subset(n_test)
    train, test = standardize(train, test)
    return train.astype(dtype), test.astype(dtype)
