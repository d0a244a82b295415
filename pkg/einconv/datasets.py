"""IDX readers and small synthetic datasets."""
import gzip
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Union

import numpy as np

from einconv.errors import IdxFormatError, ValidationError

logger = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
# Element count past which a header is treated as corrupt
MAX_ELEMENTS = 2**31

FASHION_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass(frozen=True)
class Dataset:
    """Images shaped (n, spatial..., channels) in [0, 1] and integer labels."""
    images: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValidationError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def subset(self, n: int, seed: int = 0) -> "Dataset":
        if n >= len(self):
            return self
        idx = np.sort(np.random.default_rng(seed).permutation(len(self))[:n])
        return Dataset(self.images[idx], self.labels[idx], self.n_classes)

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        return (
            Dataset(self.images[:n_first], self.labels[:n_first], self.n_classes),
            Dataset(self.images[n_first:], self.labels[n_first:], self.n_classes),
        )

    def batches(self, batch_size: int, rng: np.random.Generator) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        order = rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield self.images[idx], self.labels[idx]


def _read_bytes(path: Union[str, Path]) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def _parse_idx(raw: bytes, magic: int, path: Union[str, Path]) -> np.ndarray:
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated file ({len(raw)} bytes)")
    found = int.from_bytes(raw[:4], "big")
    if found != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated header")
    dims = tuple(int(d) for d in np.frombuffer(raw[4:header], dtype=">u4"))
    count = 1
    for d in dims:
        count *= d
        if count > MAX_ELEMENTS:
            raise IdxFormatError(f"{path}: dims {dims} overflow the element limit")
    if len(raw) - header < count:
        raise IdxFormatError(f"{path}: truncated data, {len(raw) - header} of {count} bytes")
    return np.frombuffer(raw[header:header + count], dtype=np.uint8).reshape(dims)


def load_idx(images_path: Union[str, Path], labels_path: Union[str, Path]) -> Dataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1] with a channel axis added."""
    images = _parse_idx(_read_bytes(images_path), IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), LABELS_MAGIC, labels_path)
    if len(images) != len(labels):
        raise IdxFormatError(f"{images_path} holds {len(images)} images but {labels_path} {len(labels)} labels")
    n_classes = int(labels.max()) + 1 if len(labels) else 0
    logger.info("Loaded %d images of shape %s from %s", len(images), images.shape[1:], images_path)
    return Dataset(images[..., None].astype(np.float64) / 255.0, labels.astype(np.int64), n_classes)


def load_dataset_dir(directory: Union[str, Path]) -> tuple[Dataset, Dataset]:
    """Train and test splits from a directory in the Fashion-MNIST layout (optionally gzipped)."""
    directory = Path(directory)

    def locate(name: str) -> Path:
        for candidate in (directory / name, directory / f"{name}.gz"):
            if candidate.exists():
                return candidate
        raise FileNotFoundError(f"{name} not found in {directory}")

    train = load_idx(*(locate(n) for n in FASHION_MNIST_FILES["train"]))
    test = load_idx(*(locate(n) for n in FASHION_MNIST_FILES["test"]))
    n_classes = max(train.n_classes, test.n_classes)
    return (
        Dataset(train.images, train.labels, n_classes),
        Dataset(test.images, test.labels, n_classes),
    )


def write_idx(path: Union[str, Path], array: np.ndarray, magic: int) -> None:
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(magic.to_bytes(4, "big"))
        f.write(np.array(array.shape, dtype=">u4").tobytes())
        f.write(array.tobytes())


def synthetic_separable(n: int = 64, size: int = 8, seed: int = 0, depth: int = 0) -> Dataset:
    """Two classes told apart by mean brightness: class 0 pixels in [0.55, 1], class 1 in [0, 0.45]."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    spatial = (size, size) + ((depth,) if depth else ())
    low = np.where(labels == 0, 0.55, 0.0).reshape((n,) + (1,) * len(spatial))
    images = low + 0.45 * rng.random((n,) + spatial)
    return Dataset(images[..., None], labels.astype(np.int64), 2)
