"""Dataset ingestion: IDX files, binarization, splits and synthetic factor data."""

from __future__ import annotations

import csv
import gzip
import os
import struct
from pathlib import Path

import numpy as np

from .exceptions import IDXFormatError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
DATA_DIR_ENV = "PROXVI_DATA_DIR"
VALIDATION_SIZE = 10_000


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def parse_idx(buf: bytes, expected_magic: int) -> np.ndarray:
    if len(buf) < 8:
        raise IDXFormatError(f"IDX payload too short ({len(buf)} bytes)")
    magic = struct.unpack(">I", buf[:4])[0]
    if magic != expected_magic:
        raise IDXFormatError(
            f"bad IDX magic: expected 0x{expected_magic:08x}, found 0x{magic:08x}"
        )
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IDXFormatError("IDX header truncated")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    n = int(np.prod(dims))
    if len(buf) - header < n:
        raise IDXFormatError(f"IDX payload truncated: need {n} bytes, found {len(buf) - header}")
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=header).reshape(dims).copy()


def load_idx_images(path) -> np.ndarray:
    """Read an IDX3 image file (optionally gzipped) as ``count x rows x cols`` uint8."""
    return parse_idx(_read_bytes(path), IMAGES_MAGIC)


def load_idx_labels(path) -> np.ndarray:
    return parse_idx(_read_bytes(path), LABELS_MAGIC)


def to_idx_bytes(array) -> bytes:
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    return struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()


def write_idx(path, array) -> None:
    Path(path).write_bytes(to_idx_bytes(array))


def binarize(images, threshold: float = 0.5) -> np.ndarray:
    """``pixel / 255 >= threshold`` as uint8 zeros and ones.

    Zero pixels always map to 0, so ``threshold=0`` keeps exact blanks off.
    Inputs that are already binary are returned unchanged.
    """
    images = np.asarray(images)
    if images.size and images.max() <= 1 and np.all((images == 0) | (images == 1)):
        return images.astype(np.uint8)
    on = (images.astype(np.float64) / 255.0 >= threshold) & (images > 0)
    return on.astype(np.uint8)


def downsample(images, factor: int = 2) -> np.ndarray:
    """Average-pool ``count x rows x cols`` byte images by ``factor``."""
    images = np.asarray(images, dtype=np.float64)
    n, r, c = images.shape
    pooled = images.reshape(n, r // factor, factor, c // factor, factor).mean(axis=(2, 4))
    return np.rint(pooled).astype(np.uint8)


def synth_factor_data(mu, pi: float, sigma2: float, N: int, rng):
    """Sample ``z ~ Bernoulli(pi)`` (N x K) then ``x ~ Normal(z @ mu, sigma2 I)``."""
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    z = (rng.random((N, mu.shape[0])) < pi).astype(np.float64)
    x = z @ mu + np.sqrt(sigma2) * rng.standard_normal((N, mu.shape[1]))
    return x, z


def write_csv(path, X) -> None:
    X = np.atleast_2d(X)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{j}" for j in range(X.shape[1])])
        for row in X:
            writer.writerow([repr(float(v)) for v in row])


def read_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return np.array([[float(v) for v in row] for row in reader], dtype=np.float64)


def _find_mnist(data_dir):
    data_dir = Path(data_dir)
    for name in ("train-images-idx3-ubyte", "train-images.idx3-ubyte"):
        for suffix in ("", ".gz"):
            candidate = data_dir / (name + suffix)
            if candidate.exists():
                return candidate
    return None


def load_mnist_images(data_dir=None) -> tuple:
    """Return ``(images, source)`` with images as ``count x 28 x 28`` uint8.

    Reads ``train-images-idx3-ubyte[.gz]`` from ``data_dir`` or the
    ``PROXVI_DATA_DIR`` environment variable. Without either, falls back to
    the 5000-digit MNIST subset bundled with mlxtend, shuffled with a fixed
    seed (the subset ships sorted by label).
    """
    data_dir = data_dir or os.environ.get(DATA_DIR_ENV)
    if data_dir:
        path = _find_mnist(data_dir)
        if path is not None:
            return load_idx_images(path), str(path)
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise FileNotFoundError(
            f"no MNIST IDX file found; set {DATA_DIR_ENV} or install mlxtend"
        ) from exc
    X, _ = mnist_data()
    images = X.reshape(-1, 28, 28).astype(np.uint8)
    order = np.random.default_rng(20170101).permutation(images.shape[0])
    return images[order], "mlxtend:mnist_5k"


def train_validation_split(images, n_train: int, n_validation: int,
                           validation_size: int = VALIDATION_SIZE):
    """Hold out the last ``validation_size`` images, then subsample both parts.

    The validation block is capped at half the file for small sources. Training
    images are the first ``n_train`` of the remainder; validation images the
    first ``n_validation`` of the held-out block.
    """
    n = images.shape[0]
    hold = min(validation_size, n // 2)
    train, val = images[: n - hold], images[n - hold :]
    if n_train > train.shape[0] or n_validation > val.shape[0]:
        raise ValueError(
            f"requested {n_train}/{n_validation} images but only {train.shape[0]}/{val.shape[0]} available"
        )
    return train[:n_train], val[:n_validation]


def binary_mnist(n_train: int, n_validation: int, downsample_factor: int = 1,
                 threshold: float = 0.5, data_dir=None):
    """Flattened binary training and validation images as float64 arrays."""
    images, _ = load_mnist_images(data_dir)
    train, val = train_validation_split(images, n_train, n_validation)
    if downsample_factor > 1:
        train, val = downsample(train, downsample_factor), downsample(val, downsample_factor)
    flat = lambda a: binarize(a, threshold).reshape(a.shape[0], -1).astype(np.float64)
    return flat(train), flat(val)
