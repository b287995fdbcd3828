"""Dataset ingestion: MNIST IDX files, CIFAR-10 binary batches, synthetic patterns."""

import gzip
import os
import struct

import numpy as np
import torch

from .model import LabeledDataset

MNIST_SHAPE = (28, 28, 1)
CIFAR10_SHAPE = (32, 32, 3)

# Reference checksums for the canonical gzipped MNIST archives, reported when
# ingestion fails so the operator can verify their local copies.
MNIST_FILES = {
    "train-images-idx3-ubyte": "f68b3c2dcbeaaa9fbdd348bbdeb94873",
    "train-labels-idx1-ubyte": "d53e105ee54ea40749a09fcbcd1e9432",
}
CIFAR10_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_RECORD_BYTES = 3073


class IngestionError(RuntimeError):
    pass


def _open_maybe_gzip(path):
    if path.endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Parse an IDX file (unsigned-byte payload, the MNIST layout)."""
    with _open_maybe_gzip(path) as f:
        magic = struct.unpack(">I", f.read(4))[0]
        dtype_code = (magic >> 8) & 0xFF
        ndim = magic & 0xFF
        if magic >> 16 != 0 or dtype_code != 0x08:
            raise IngestionError(f"{path}: bad IDX magic 0x{magic:08x}")
        dims = struct.unpack(">" + "I" * ndim, f.read(4 * ndim))
        data = np.frombuffer(f.read(), dtype=np.uint8)
    if data.size != int(np.prod(dims)):
        raise IngestionError(f"{path}: payload size does not match header dims {dims}")
    return data.reshape(dims)


def _find_file(data_dir, stem):
    for name in (stem, stem + ".gz"):
        path = os.path.join(data_dir, name)
        if os.path.exists(path):
            return path
    return None


def load_mnist(data_dir):
    images_path = _find_file(data_dir, "train-images-idx3-ubyte")
    labels_path = _find_file(data_dir, "train-labels-idx1-ubyte")
    if images_path is None or labels_path is None:
        expected = "\n".join(f"  {k}(.gz)  md5(gz)={v}" for k, v in MNIST_FILES.items())
        raise IngestionError(
            f"MNIST IDX files not found under {data_dir}; expected:\n{expected}"
        )
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3 or images.shape[1:] != (28, 28):
        raise IngestionError(f"{images_path}: expected Nx28x28 images, got {images.shape}")
    if labels.shape[0] != images.shape[0]:
        raise IngestionError("MNIST image/label counts differ")
    symbols = images.astype(np.float32)[..., None] / 255.0
    return symbols, labels.astype(np.int64)


def load_cifar10(data_dir):
    paths = [os.path.join(data_dir, n) for n in CIFAR10_FILES]
    present = [p for p in paths if os.path.exists(p)]
    if not present:
        raise IngestionError(
            f"CIFAR-10 binary batches not found under {data_dir}; expected "
            f"{', '.join(CIFAR10_FILES)} ({CIFAR10_RECORD_BYTES} bytes per record)"
        )
    images, labels = [], []
    for path in present:
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size % CIFAR10_RECORD_BYTES:
            raise IngestionError(f"{path}: size is not a multiple of {CIFAR10_RECORD_BYTES}")
        raw = raw.reshape(-1, CIFAR10_RECORD_BYTES)
        labels.append(raw[:, 0].astype(np.int64))
        images.append(raw[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
    symbols = np.concatenate(images).astype(np.float32) / 255.0
    return symbols, np.concatenate(labels)


def _disk(size, cy, cx, r):
    yy, xx = np.ogrid[:size, :size]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def synthetic_symbol(rng: np.random.Generator, label: int, size: int = 28) -> np.ndarray:
    """One procedurally generated pattern symbol for the given class label."""
    img = np.zeros((size, size), dtype=np.float32)
    cy, cx = rng.integers(size // 2 - 4, size // 2 + 5, size=2)
    r = int(rng.integers(6, 10))
    amp = float(rng.uniform(0.65, 1.0))
    yy, xx = np.indices((size, size))
    if label == 0:
        img[_disk(size, cy, cx, r)] = amp
    elif label == 1:
        img[_disk(size, cy, cx, r) & ~_disk(size, cy, cx, r - 4)] = amp
    elif label == 2:
        img[cy - r : cy + r, cx - r : cx + r] = amp
        img[cy - r + 4 : cy + r - 4, cx - r + 4 : cx + r - 4] = 0.0
    elif label == 3:
        img[cy - r : cy + r, cx - r : cx + r] = amp
    elif label == 4:
        img[cy - r : cy + r, cx - 3 : cx + 3] = amp
        img[cy - 3 : cy + 3, cx - r : cx + r] = amp
    elif label == 5:
        img[np.abs(yy - cy) + np.abs(xx - cx) <= r] = amp
    elif label == 6:
        img[yy <= cy + rng.integers(-3, 4)] = amp
    elif label == 7:
        img[xx <= cx + rng.integers(-3, 4)] = amp
    elif label == 8:
        img = amp * np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * r * r))).astype(
            np.float32
        )
    elif label == 9:
        tri = (yy >= cy - r) & (yy <= cy + r) & (np.abs(xx - cx) <= (yy - (cy - r)) // 2)
        img[tri] = amp
    else:
        raise ValueError("synthetic labels run 0..9")
    # occasional bright distractor square (kept off the upper-left corner) so
    # occlusion-like patches are in-distribution everywhere except the corner
    if rng.uniform() < 0.5:
        side = int(rng.integers(3, 6))
        while True:
            py = int(rng.integers(0, size - side))
            px = int(rng.integers(0, size - side))
            if py >= 6 or px >= 6:
                break
        img[py : py + side, px : px + side] = 1.0
    img = img + rng.uniform(0.0, 0.04, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)[..., None]


def generate_synthetic(count: int, seed: int, size: int = 28):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=count)
    symbols = np.stack([synthetic_symbol(rng, int(l), size) for l in labels])
    return symbols.astype(np.float32), labels.astype(np.int64)


def ingest_dataset(name: str, subset_size: int, seed: int, data_dir=None):
    """Load a dataset and return paired transmitter/receiver copies.

    The two datasets start out identical; poisoning later diverges them.
    Subset selection is deterministic in the seed.
    """
    if subset_size < 1:
        raise IngestionError("subset_size must be >= 1")
    if name == "synthetic":
        symbols, labels = generate_synthetic(subset_size, seed)
    elif name == "mnist":
        if data_dir is None:
            raise IngestionError("mnist ingestion requires data_dir")
        symbols, labels = load_mnist(data_dir)
    elif name == "cifar10":
        if data_dir is None:
            raise IngestionError("cifar10 ingestion requires data_dir")
        symbols, labels = load_cifar10(data_dir)
    else:
        raise IngestionError(f"unknown dataset {name!r}")
    if name != "synthetic":
        if subset_size > symbols.shape[0]:
            raise IngestionError(
                f"subset_size {subset_size} exceeds dataset size {symbols.shape[0]}"
            )
        idx = np.random.default_rng(seed).choice(symbols.shape[0], subset_size, replace=False)
        symbols, labels = symbols[idx], labels[idx]
    symbols_t = torch.from_numpy(np.ascontiguousarray(symbols))
    labels_t = torch.from_numpy(np.ascontiguousarray(labels))
    d_t = LabeledDataset(symbols_t, labels_t)
    d_r = d_t.clone()
    return d_t, d_r


def default_target(dataset: LabeledDataset, label: int = 5) -> torch.Tensor:
    """The adversary's target symbol: the first training sample with the given label."""
    if dataset.labels is not None:
        hits = torch.nonzero(dataset.labels == label).flatten()
        if len(hits):
            return dataset.symbols[hits[0]].clone()
    return dataset.symbols[0].clone()
