import gzip

import numpy as np
import pytest

from einconv.datasets import (
    FASHION_MNIST_FILES,
    IMAGES_MAGIC,
    LABELS_MAGIC,
    Dataset,
    load_dataset_dir,
    load_idx,
    synthetic_separable,
    write_idx,
)
from einconv.errors import IdxFormatError, ValidationError


@pytest.fixture
def idx_pair(tmp_path):
    images = np.arange(3 * 2 * 2, dtype=np.uint8).reshape(3, 2, 2) * 20
    labels = np.array([0, 2, 1], dtype=np.uint8)
    write_idx(tmp_path / "images", images, IMAGES_MAGIC)
    write_idx(tmp_path / "labels", labels, LABELS_MAGIC)
    return tmp_path / "images", tmp_path / "labels"


def test_load_idx(idx_pair):
    data = load_idx(*idx_pair)
    assert len(data) == 3
    assert data.sample_shape == (2, 2, 1)
    assert data.n_classes == 3
    assert data.images.max() <= 1.0
    assert data.images[0, 0, 1, 0] == pytest.approx(20 / 255)
    np.testing.assert_array_equal(data.labels, [0, 2, 1])


def test_bad_magic(idx_pair):
    images, labels = idx_pair
    with pytest.raises(IdxFormatError, match="bad magic"):
        load_idx(labels, labels)


def test_truncated_data(idx_pair):
    images, labels = idx_pair
    images.write_bytes(images.read_bytes()[:-1])
    with pytest.raises(IdxFormatError, match="truncated data"):
        load_idx(images, labels)


def test_truncated_header(tmp_path):
    path = tmp_path / "images"
    path.write_bytes(IMAGES_MAGIC.to_bytes(4, "big") + b"\x00\x00")
    with pytest.raises(IdxFormatError, match="truncated header"):
        load_idx(path, path)


def test_oversized_dims(tmp_path):
    path = tmp_path / "images"
    path.write_bytes(IMAGES_MAGIC.to_bytes(4, "big") + np.array([2**16, 2**16, 2**16], dtype=">u4").tobytes())
    with pytest.raises(IdxFormatError, match="overflow"):
        load_idx(path, path)


def test_count_mismatch(tmp_path, idx_pair):
    images, _ = idx_pair
    write_idx(tmp_path / "short", np.array([1, 0], dtype=np.uint8), LABELS_MAGIC)
    with pytest.raises(IdxFormatError):
        load_idx(images, tmp_path / "short")


def test_idx_errors_exit_with_usage_code():
    assert IdxFormatError.exit_code == 2
    assert issubclass(IdxFormatError, ValueError)


def test_load_dataset_dir_reads_gzip(tmp_path):
    rng = np.random.default_rng(0)
    for split, n in (("train", 6), ("test", 4)):
        images_name, labels_name = FASHION_MNIST_FILES[split]
        write_idx(tmp_path / images_name, rng.integers(0, 256, size=(n, 3, 3)), IMAGES_MAGIC)
        write_idx(tmp_path / labels_name, np.arange(n) % 3, LABELS_MAGIC)
    images_name = FASHION_MNIST_FILES["test"][0]
    raw = (tmp_path / images_name).read_bytes()
    (tmp_path / images_name).unlink()
    with gzip.open(tmp_path / f"{images_name}.gz", "wb") as f:
        f.write(raw)

    train, test = load_dataset_dir(tmp_path)
    assert len(train) == 6
    assert len(test) == 4
    assert train.n_classes == test.n_classes == 3


def test_load_dataset_dir_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset_dir(tmp_path)


def test_synthetic_separable():
    data = synthetic_separable(10, size=4, seed=1)
    assert data.sample_shape == (4, 4, 1)
    assert data.n_classes == 2
    means = data.images.mean(axis=(1, 2, 3))
    assert (means[data.labels == 0] > 0.5).all()
    assert (means[data.labels == 1] < 0.5).all()
    assert synthetic_separable(4, size=4, depth=3).sample_shape == (4, 4, 3, 1)


def test_subset_and_split():
    data = synthetic_separable(10, size=2)
    assert len(data.subset(4)) == 4
    assert data.subset(20) is data
    first, rest = data.split(7)
    assert (len(first), len(rest)) == (7, 3)


def test_batches_cover_every_sample():
    data = synthetic_separable(10, size=2)
    seen = sum(len(y) for _, y in data.batches(3, np.random.default_rng(0)))
    assert seen == 10


def test_dataset_rejects_length_mismatch():
    with pytest.raises(ValidationError):
        Dataset(np.zeros((2, 2, 2, 1)), np.zeros(3, dtype=np.int64), 2)
