import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icnet import datasets as ds
from icnet.datasets import DataError


def _write_mnist(d, n=12, split="train", rng=None, gz=False):
    rng = rng or np.random.default_rng(0)
    images = rng.integers(0, 256, size=(n, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, size=n, dtype=np.uint8)
    img_name, lbl_name = ds.MNIST_FILES[split]
    for name, arr in ((img_name, images), (lbl_name, labels)):
        blob = ds.write_idx(arr)
        if gz:
            (d / (name + ".gz")).write_bytes(gzip.compress(blob))
        else:
            (d / name).write_bytes(blob)
    return images, labels


def _write_cifar(d, n_per_batch=6, rng=None):
    rng = rng or np.random.default_rng(0)
    out = {}
    for name in ds.CIFAR_TRAIN_FILES + [ds.CIFAR_TEST_FILE]:
        labels = rng.integers(0, 10, n_per_batch)
        images = rng.integers(0, 256, size=(n_per_batch, 32, 32, 3), dtype=np.uint8)
        (d / name).write_bytes(ds.write_cifar_records(labels, images))
        out[name] = (labels, images)
    return out


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=3), st.integers(0, 2**32 - 1))
def test_idx_round_trip_bytes(dims, seed):
    arr = np.random.default_rng(seed).integers(0, 256, size=dims, dtype=np.uint8)
    blob = ds.write_idx(arr)
    back = ds.parse_idx(blob)
    np.testing.assert_array_equal(back, arr)
    assert ds.write_idx(back) == blob


def test_idx_magic_values():
    assert ds.write_idx(np.zeros((2, 3, 3), np.uint8))[:4] == struct.pack(">I", ds.IDX_IMAGES_MAGIC)
    assert ds.write_idx(np.zeros(2, np.uint8))[:4] == struct.pack(">I", ds.IDX_LABELS_MAGIC)


def test_idx_errors():
    good = ds.write_idx(np.zeros((2, 4, 4), np.uint8))
    with pytest.raises(DataError, match="magic"):
        ds.parse_idx(good, ds.IDX_LABELS_MAGIC)
    with pytest.raises(DataError, match="payload"):
        ds.parse_idx(good[:-1])
    with pytest.raises(DataError, match="payload"):
        ds.parse_idx(good + b"\0")
    with pytest.raises(DataError):
        ds.parse_idx(b"\0\0")
    with pytest.raises(DataError, match="type"):
        ds.parse_idx(struct.pack(">I", 0x0D01) + struct.pack(">I", 0))


@pytest.mark.parametrize("gz", [False, True])
def test_load_mnist(tmp_path, gz):
    images, labels = _write_mnist(tmp_path, gz=gz)
    d = ds.load_mnist(tmp_path, "train")
    assert d.x.shape == (12, 28, 28, 1)
    np.testing.assert_array_equal(d.y, labels)
    np.testing.assert_allclose(d.x[..., 0], images / 255.0)
    assert 0.0 <= d.x.min() and d.x.max() <= 1.0


def test_load_mnist_count_mismatch(tmp_path):
    _write_mnist(tmp_path)
    (tmp_path / "train-labels-idx1-ubyte").write_bytes(ds.write_idx(np.zeros(5, np.uint8)))
    with pytest.raises(DataError, match="labels"):
        ds.load_mnist(tmp_path)


def test_load_mnist_missing_file(tmp_path):
    with pytest.raises(DataError, match="not found"):
        ds.load_mnist(tmp_path)


def test_cifar_round_trip_and_layout():
    rng = np.random.default_rng(1)
    labels = rng.integers(0, 10, 4)
    images = rng.integers(0, 256, size=(4, 32, 32, 3), dtype=np.uint8)
    blob = ds.write_cifar_records(labels, images)
    assert len(blob) == 4 * ds.CIFAR_RECORD
    # record layout: label byte, then the full red plane, then green, then blue
    assert blob[0] == labels[0] and blob[1] == images[0, 0, 0, 0] and blob[1 + 1024] == images[0, 0, 0, 1]
    back_l, back_i = ds.parse_cifar_records(blob)
    np.testing.assert_array_equal(back_l, labels)
    np.testing.assert_array_equal(back_i, images)
    assert ds.write_cifar_records(back_l, back_i) == blob


def test_cifar_errors():
    blob = ds.write_cifar_records([1], np.zeros((1, 32, 32, 3), np.uint8))
    with pytest.raises(DataError, match="multiple"):
        ds.parse_cifar_records(blob[:-1])
    bad = bytes([10]) + blob[1:]
    with pytest.raises(DataError, match="label"):
        ds.parse_cifar_records(bad)


def test_cifar_subset_is_seeded(tmp_path):
    _write_cifar(tmp_path)
    a = ds.load_cifar10_subset(tmp_path, n_train=10, seed=3)
    b = ds.load_cifar10_subset(tmp_path, n_train=10, seed=3)
    c = ds.load_cifar10_subset(tmp_path, n_train=10, seed=4)
    assert len(a) == 10 and a.augment
    np.testing.assert_array_equal(a.x, b.x)
    assert not np.array_equal(a.x, c.x)
    test = ds.load_cifar10_subset(tmp_path, split="test")
    assert len(test) == 6 and not test.augment


def test_cifar_nested_directory(tmp_path):
    nested = tmp_path / "cifar-10-batches-bin"
    nested.mkdir()
    _write_cifar(nested)
    assert len(ds.load_cifar10_subset(tmp_path, n_train=7)) == 7


def test_standardize_uses_train_statistics():
    train = ds.make_blobs(200, (8, 8, 3), seed=0)
    test = ds.make_blobs(100, (8, 8, 3), seed=0, split="test")
    mean, std = ds.channel_stats(train.x)
    tr, te = ds.standardize(train, test)
    np.testing.assert_allclose(tr.x.mean(axis=(0, 1, 2)), 0, atol=1e-12)
    np.testing.assert_allclose(tr.x.std(axis=(0, 1, 2)), 1, atol=1e-12)
    np.testing.assert_allclose(te.x, (test.x - mean) / std)


def test_blobs_deterministic_and_labelled():
    a = ds.make_blobs(50, seed=2)
    b = ds.make_blobs(50, seed=2)
    np.testing.assert_array_equal(a.x, b.x)
    assert a.x.shape == (50, 28, 28, 1) and set(np.unique(a.y)) <= set(range(10))


def test_xor_dataset():
    d = ds.make_xor()
    np.testing.assert_array_equal(d.y, [1, 0, 0, 1])
    np.testing.assert_array_equal(d.targets, [0.25, 0, 0, 0.25])


def test_dataset_validates_labels():
    with pytest.raises(DataError):
        ds.Dataset(np.zeros((2, 1)), np.array([0, 5]), 3)
    with pytest.raises(DataError):
        ds.Dataset(np.zeros((2, 1)), np.array([0]), 3)


def test_augmentation_is_a_function_of_seed_epoch_index():
    x = np.random.default_rng(0).normal(size=(6, 8, 8, 2))
    idx = np.array([5, 1, 3, 0, 2, 4])
    a = ds.augment_batch(x, 1, 2, idx)
    b = ds.augment_batch(x, 1, 2, idx)
    np.testing.assert_array_equal(a, b)
    # same sample in a different batch position gets the same draw
    solo = ds.augment_batch(x[2:3], 1, 2, idx[2:3])
    np.testing.assert_array_equal(solo[0], a[2])
    assert not np.array_equal(ds.augment_batch(x, 1, 3, idx), a)
    assert a.shape == x.shape


def test_augmentation_crops_come_from_padded_image():
    x = np.ones((50, 8, 8, 1))
    out = ds.augment_batch(x, 0, 0, np.arange(50))
    # every pixel is either an original pixel (1) or zero padding
    assert set(np.unique(out)) <= {0.0, 1.0}
    assert (out == 0).any()


def test_load_splits_needs_a_directory(monkeypatch):
    monkeypatch.delenv("IC_DATA_DIR", raising=False)
    with pytest.raises(DataError, match="data directory"):
        ds.load_splits("mnist")
    with pytest.raises(DataError, match="unknown"):
        ds.load_splits("imagenet")


def test_load_splits_reads_env_dir(tmp_path, monkeypatch):
    _write_mnist(tmp_path, n=20)
    _write_mnist(tmp_path, n=8, split="test", rng=np.random.default_rng(1))
    monkeypatch.setenv("IC_DATA_DIR", str(tmp_path))
    train, test = ds.load_splits("mnist", n_train=10, dtype=np.float32)
    assert len(train) == 10 and len(test) == 8 and train.x.dtype == np.float32
