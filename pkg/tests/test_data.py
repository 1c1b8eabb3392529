import gzip
import struct

import numpy as np
import pytest

from featrecon.data import Dataset, load_dataset, load_mnist, make_digits, read_idx_images
from featrecon.errors import IngestionError


def test_digits_shape_and_range():
    ds = make_digits(50, seed=0)
    assert ds.images.shape == (50, 1, 32, 32)
    assert ds.images.min() >= -1.0 and ds.images.max() <= 1.0
    assert ds.images.dtype == np.float32


def test_digits_deterministic_and_seed_sensitive():
    a = make_digits(40, seed=0)
    b = make_digits(40, seed=0)
    c = make_digits(40, seed=1)
    assert np.array_equal(a.images, b.images)
    assert not np.array_equal(a.images, c.images)


def test_digits_splits_differ():
    a = make_digits(40, seed=0, split="train")
    b = make_digits(40, seed=0, split="test")
    assert not np.array_equal(a.images, b.images)


def test_digits_balanced_labels():
    ds = make_digits(100, seed=0)
    assert np.array_equal(np.bincount(ds.labels), np.full(10, 10))


def test_dataset_invariants_rejected():
    with pytest.raises(ValueError, match="power of two"):
        Dataset(np.zeros((2, 1, 20, 20), dtype=np.float32), np.zeros(2))
    with pytest.raises(ValueError, match=r"\[-1, 1\]"):
        Dataset(np.full((2, 1, 8, 8), 3.0, dtype=np.float32), np.zeros(2))
    with pytest.raises(ValueError, match="mismatch"):
        Dataset(np.zeros((2, 1, 8, 8), dtype=np.float32), np.zeros(3))


def _write_idx(tmp_path, n=12, side=28, gz=False):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(n, side, side), dtype=np.uint8)
    labels = rng.integers(0, 10, size=n, dtype=np.uint8)
    opener = gzip.open if gz else open
    suffix = ".gz" if gz else ""
    with opener(tmp_path / f"train-images-idx3-ubyte{suffix}", "wb") as f:
        f.write(struct.pack(">IIII", 2051, n, side, side))
        f.write(images.tobytes())
    with opener(tmp_path / f"train-labels-idx1-ubyte{suffix}", "wb") as f:
        f.write(struct.pack(">II", 2049, n))
        f.write(labels.tobytes())
    return images, labels


def test_mnist_idx_roundtrip(tmp_path):
    images, labels = _write_idx(tmp_path)
    ds = load_mnist(str(tmp_path), split="train")
    assert ds.images.shape == (12, 1, 32, 32)
    assert np.array_equal(ds.labels, labels)
    # zero padding puts the original content in the 2..30 window
    recovered = (ds.images[:, 0, 2:30, 2:30] + 1.0) / 2.0 * 255.0
    assert np.allclose(recovered, images, atol=0.51)
    assert np.all(ds.images[:, 0, 0, :] == -1.0)


def test_mnist_gzip_supported(tmp_path):
    _write_idx(tmp_path, gz=True)
    ds = load_mnist(str(tmp_path), split="train")
    assert len(ds) == 12


def test_mnist_missing_is_ingestion_error(tmp_path):
    with pytest.raises(IngestionError):
        load_mnist(str(tmp_path / "nowhere"), split="train")
    with pytest.raises(IngestionError):
        load_dataset("mnist", root=str(tmp_path / "nowhere"))


def test_idx_bad_magic(tmp_path):
    path = tmp_path / "train-images-idx3-ubyte"
    path.write_bytes(struct.pack(">IIII", 1234, 1, 2, 2) + b"\x00" * 4)
    with pytest.raises(IngestionError, match="magic"):
        read_idx_images(str(path))


def test_idx_truncated(tmp_path):
    path = tmp_path / "train-images-idx3-ubyte"
    path.write_bytes(struct.pack(">IIII", 2051, 4, 28, 28) + b"\x00" * 10)
    with pytest.raises(IngestionError, match="truncated"):
        read_idx_images(str(path))


def test_unknown_dataset_id():
    with pytest.raises(IngestionError, match="unknown dataset"):
        load_dataset("celeba")
