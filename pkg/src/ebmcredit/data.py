"""MNIST IDX reading and writing, batching and synthetic datasets."""

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from .model import Sample

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IDXError(ValueError):
    pass


class BadMagicError(IDXError):
    pass


class TruncatedPayloadError(IDXError):
    pass


class CountMismatchError(IDXError):
    pass


@dataclass
class Dataset:
    """Inputs in [0, 1] and one-hot targets stored as two row-aligned arrays."""

    inputs: np.ndarray
    targets: np.ndarray
    name: str = "dataset"
    split: str = "train"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if len(self.inputs) != len(self.targets):
            raise CountMismatchError(f"{len(self.inputs)} inputs but {len(self.targets)} targets")
        if self.inputs.size and (self.inputs.min() < 0.0 or self.inputs.max() > 1.0):
            raise ValueError("inputs must lie in [0, 1]")

    def __len__(self):
        return len(self.inputs)

    @property
    def labels(self):
        return np.argmax(self.targets, axis=1)

    @property
    def samples(self):
        return [Sample(x, t) for x, t in zip(self.inputs, self.targets)]

    def as_batch(self):
        return Sample(self.inputs, self.targets)

    def head(self, n):
        return Dataset(self.inputs[:n], self.targets[:n], self.name, self.split)


def one_hot(labels, n_classes=10):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in 0..{n_classes - 1}")
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _open(path, mode="rb"):
    return gzip.open(path, mode) if str(path).endswith(".gz") else open(path, mode)


def read_idx(path, expected_magic):
    """Return the payload of an IDX file as a uint8 array shaped by its header."""
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise TruncatedPayloadError(f"{path}: file too short for an IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise BadMagicError(f"{path}: magic {magic:#010x}, expected {expected_magic:#010x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedPayloadError(f"{path}: header cut short")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise TruncatedPayloadError(f"{path}: payload has {len(raw) - header} bytes, header promises {size}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def write_idx(path, array, magic):
    array = np.asarray(array, dtype=np.uint8)
    if magic & 0xFF != array.ndim:
        raise ValueError(f"magic {magic:#010x} does not match a {array.ndim}-d array")
    with _open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(">" + "I" * array.ndim, *array.shape))
        f.write(array.tobytes())


def load_mnist_idx(images_path, labels_path, limit=None, name="mnist", split="train"):
    """Load an IDX image/label pair; pixels are scaled to [0, 1] and labels one-hot encoded."""
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if len(images) != len(labels):
        raise CountMismatchError(f"{len(images)} images but {len(labels)} labels")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    inputs = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return Dataset(inputs, one_hot(labels, 10), name, split)


def _find(data_dir, stem):
    for candidate in (stem, stem + ".gz"):
        path = os.path.join(data_dir, candidate)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(f"no {stem}[.gz] in {data_dir}")


def load_mnist_split(data_dir, split, limit=None):
    images, labels = FILES[split]
    return load_mnist_idx(_find(data_dir, images), _find(data_dir, labels), limit, "mnist", split)


def save_mnist_idx(dataset, images_path, labels_path, shape=(28, 28)):
    pixels = np.rint(dataset.inputs * 255.0).astype(np.uint8).reshape((len(dataset),) + tuple(shape))
    write_idx(images_path, pixels, IMAGE_MAGIC)
    write_idx(labels_path, dataset.labels.astype(np.uint8), LABEL_MAGIC)


def export_bundled_mnist(out_dir, n_test=1000, seed=0, compress=False):
    """Write the 5,000-image MNIST sample shipped with mlxtend as IDX train/test files.

    The sample is sorted by class, so it is shuffled with ``seed`` before
    the last ``n_test`` images are set aside as the test split.
    """
    from mlxtend.data import mnist_data

    images, labels = mnist_data()
    order = np.random.default_rng(seed).permutation(len(labels))
    images = images[order].astype(np.uint8).reshape(-1, 28, 28)
    labels = labels[order].astype(np.uint8)
    os.makedirs(out_dir, exist_ok=True)
    ext = ".gz" if compress else ""
    cut = len(labels) - n_test
    paths = []
    for split, sl in (("train", slice(0, cut)), ("test", slice(cut, None))):
        img_name, lab_name = FILES[split]
        img_path = os.path.join(out_dir, img_name + ext)
        lab_path = os.path.join(out_dir, lab_name + ext)
        write_idx(img_path, images[sl], IMAGE_MAGIC)
        write_idx(lab_path, labels[sl], LABEL_MAGIC)
        paths += [img_path, lab_path]
    return paths


def batch_iterator(dataset, batch_size, seed=0, shuffle=True):
    """Minibatches as stacked :class:`Sample` objects; the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot batch an empty dataset")
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    return [
        Sample(dataset.inputs[order[i:i + batch_size]], dataset.targets[order[i:i + batch_size]])
        for i in range(0, n, batch_size)
    ]


def synthetic_dataset(n, input_dim, n_classes, seed=0):
    """Uniform inputs labelled by a fixed random linear rule, so a linear model can fit them."""
    if n < 1 or input_dim < 1 or n_classes < 2:
        raise ValueError("need n >= 1, input_dim >= 1 and n_classes >= 2")
    rng = np.random.default_rng(seed)
    rule = rng.normal(size=(input_dim, n_classes))
    inputs = rng.uniform(0.0, 1.0, size=(n, input_dim))
    labels = np.argmax((inputs - 0.5) @ rule, axis=1)
    return Dataset(inputs, one_hot(labels, n_classes), "synthetic", "train")
