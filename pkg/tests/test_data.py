import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from proxvi.data import (
    DATA_DIR_ENV,
    IMAGES_MAGIC,
    binarize,
    binary_mnist,
    downsample,
    load_idx_images,
    load_idx_labels,
    load_mnist_images,
    parse_idx,
    read_csv,
    synth_factor_data,
    to_idx_bytes,
    train_validation_split,
    write_csv,
    write_idx,
)
from proxvi.exceptions import IDXFormatError


def test_hand_built_idx_round_trip(tmp_path):
    payload = bytes([0, 1, 2, 3, 255, 254, 253, 252])
    raw = struct.pack(">IIII", 0x803, 2, 2, 2) + payload
    path = tmp_path / "imgs"
    path.write_bytes(raw)
    images = load_idx_images(path)
    assert images.shape == (2, 2, 2)
    np.testing.assert_array_equal(images.ravel(), list(payload))
    gz = tmp_path / "imgs.gz"
    gz.write_bytes(gzip.compress(raw))
    np.testing.assert_array_equal(load_idx_images(gz), images)


def test_idx_errors(tmp_path):
    labels = struct.pack(">II", 0x801, 3) + bytes([1, 2, 3])
    path = tmp_path / "labels"
    path.write_bytes(labels)
    np.testing.assert_array_equal(load_idx_labels(path), [1, 2, 3])
    with pytest.raises(IDXFormatError, match="0x00000803.*0x00000801|0x00000801.*0x00000803"):
        load_idx_images(path)
    with pytest.raises(IDXFormatError):
        parse_idx(struct.pack(">IIII", 0x803, 2, 2, 2) + bytes(5), IMAGES_MAGIC)
    with pytest.raises(IDXFormatError):
        parse_idx(b"\x00\x00", IMAGES_MAGIC)


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(0, 4), st.integers(1, 5), st.integers(1, 5))))
def test_idx_write_read_is_identity(images):
    np.testing.assert_array_equal(parse_idx(to_idx_bytes(images), IMAGES_MAGIC), images)


def test_write_idx_file(tmp_path):
    images = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    write_idx(tmp_path / "x", images)
    np.testing.assert_array_equal(load_idx_images(tmp_path / "x"), images)


def test_binarize_examples():
    assert not binarize(np.zeros((2, 3, 3), dtype=np.uint8)).any()
    assert binarize(np.array([128], dtype=np.uint8))[0] == 1
    assert binarize(np.array([127], dtype=np.uint8))[0] == 0
    np.testing.assert_array_equal(
        binarize(np.array([0, 1, 17, 255], dtype=np.uint8), threshold=0.0), [0, 1, 1, 1])


@settings(max_examples=40, deadline=None)
@given(arrays(np.uint8, st.integers(1, 50)), st.floats(0.0, 1.0))
def test_binarize_is_idempotent(images, threshold):
    once = binarize(images, threshold)
    np.testing.assert_array_equal(binarize(once, threshold), once)


def test_downsample_average_pools():
    images = np.array([[[0, 255, 10, 10], [255, 0, 10, 10],
                        [1, 1, 2, 2], [1, 1, 2, 2]]], dtype=np.uint8)
    np.testing.assert_array_equal(downsample(images), [[[128, 10], [1, 2]]])


def test_synth_factor_data(rng):
    mu = np.array([[1.0, -2.0], [0.5, 3.0]])
    x, z = synth_factor_data(mu, 1.0, 1e-30, 5, rng)
    np.testing.assert_allclose(x, np.tile(mu.sum(0), (5, 1)))
    np.testing.assert_array_equal(z, 1.0)
    x, _ = synth_factor_data(mu, 0.3, 1.0, 10**5, np.random.default_rng(0))
    target = 0.3 * mu.sum(0)
    se = x.std(axis=0) / np.sqrt(x.shape[0])
    assert np.all(np.abs(x.mean(axis=0) - target) < 3 * se)
    a, _ = synth_factor_data(mu, 0.3, 1.0, 20, np.random.default_rng(4))
    b, _ = synth_factor_data(mu, 0.3, 1.0, 20, np.random.default_rng(4))
    assert np.array_equal(a, b)


def test_csv_round_trip(tmp_path, rng):
    X = rng.normal(size=(7, 3))
    write_csv(tmp_path / "x.csv", X)
    assert (tmp_path / "x.csv").read_text().splitlines()[0] == "x0,x1,x2"
    np.testing.assert_array_equal(read_csv(tmp_path / "x.csv"), X)


def test_split_holds_out_the_tail():
    images = np.arange(100)[:, None, None] * np.ones((1, 2, 2), dtype=int)
    train, val = train_validation_split(images, 10, 5, validation_size=30)
    assert train[0, 0, 0] == 0 and val[0, 0, 0] == 70
    assert train.shape[0] == 10 and val.shape[0] == 5
    _, val = train_validation_split(images, 10, 5)  # capped at half the file
    assert val[0, 0, 0] == 50
    with pytest.raises(ValueError):
        train_validation_split(images, 80, 5, validation_size=30)


def test_mnist_from_data_directory(tmp_path, monkeypatch):
    images = np.random.default_rng(0).integers(0, 256, (40, 28, 28)).astype(np.uint8)
    write_idx(tmp_path / "train-images-idx3-ubyte", images)
    monkeypatch.setenv(DATA_DIR_ENV, str(tmp_path))
    loaded, source = load_mnist_images()
    np.testing.assert_array_equal(loaded, images)
    assert source.endswith("train-images-idx3-ubyte")
    train, val = binary_mnist(10, 5, downsample_factor=2)
    assert train.shape == (10, 196) and val.shape == (5, 196)
    assert set(np.unique(train)) <= {0.0, 1.0}


def test_mnist_fallback_subset(monkeypatch):
    monkeypatch.delenv(DATA_DIR_ENV, raising=False)
    images, source = load_mnist_images()
    assert images.shape[1:] == (28, 28) and images.dtype == np.uint8
    train, val = binary_mnist(1000, 500)
    assert train.shape == (1000, 784) and val.shape == (500, 784)
    again, _ = binary_mnist(1000, 500)
    assert np.array_equal(train, again)
