import os
import struct

import numpy as np
import pytest

from cpnas import tensor as T
from cpnas.data import (
    CIFAR_RECORD,
    DataError,
    Dataset,
    cutout,
    load_cifar10,
    make_splits,
    parse_cifar_records,
    scale_pixels,
    synth_dataset,
)


def _write_batch(path, labels, rng):
    pixels = rng.integers(0, 256, size=(len(labels), 3072), dtype=np.uint8)
    with open(path, "wb") as fh:
        for lab, pix in zip(labels, pixels):
            fh.write(bytes([lab]) + pix.tobytes())
    return pixels


def test_pixel_endpoints():
    np.testing.assert_array_equal(scale_pixels(np.array([0, 255], dtype=np.uint8)), [-1.0, 1.0])


def test_record_count_and_byte_level_oracle(tmp_path, rng):
    path = tmp_path / "data_batch_1.bin"
    _write_batch(path, [3, 9, 0, 7], rng)
    blob = path.read_bytes()
    assert len(blob) // CIFAR_RECORD == 4
    labels, pixels = parse_cifar_records(blob)
    # independent reader: unpack the first record with struct
    first = struct.unpack_from("<B3072B", blob, 0)
    assert labels[0] == first[0] == 3
    red_row0 = first[1:33]
    green_00 = first[1 + 1024]
    assert tuple(pixels[0, 0, 0]) == red_row0
    assert pixels[0, 1, 0, 0] == green_00
    ds = load_cifar10(str(tmp_path), "train")
    assert len(ds) == 4 and ds.images.shape == (4, 3, 32, 32)
    assert ds.images[0, 1, 0, 0] == pytest.approx(green_00 / 127.5 - 1)


def test_cifar_errors(tmp_path, rng):
    with pytest.raises(DataError, match="not a positive multiple"):
        parse_cifar_records(b"\0" * (CIFAR_RECORD - 1))
    bad = bytearray(CIFAR_RECORD)
    bad[0] = 10
    with pytest.raises(DataError, match="label 10"):
        parse_cifar_records(bytes(bad))
    with pytest.raises(DataError):
        load_cifar10(str(tmp_path / "missing"))
    with pytest.raises(DataError):
        load_cifar10(str(tmp_path), "test")


def test_synth_deterministic_bytes():
    a = synth_dataset(3, 50, 8, seed=4)
    b = synth_dataset(3, 50, 8, seed=4)
    assert a.images.tobytes() == b.images.tobytes() and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, synth_dataset(3, 50, 8, seed=5).images)
    assert np.bincount(a.labels).tolist() == [17, 17, 16]


def _linear_probe(train, test):
    xtr = np.c_[train.images.reshape(len(train), -1), np.ones(len(train))]
    xte = np.c_[test.images.reshape(len(test), -1), np.ones(len(test))]
    w, *_ = np.linalg.lstsq(xtr, np.eye(train.num_classes)[train.labels], rcond=None)
    return float(np.mean(np.argmax(xte @ w, 1) == test.labels))


def test_large_separation_is_linearly_separable():
    with T.precision(64):
        full = synth_dataset(4, 2000, 8, seed=0, separation=4.0, jitter=0)
    acc = _linear_probe(full.subset(np.arange(1000)), full.subset(np.arange(1000, 2000)))
    assert acc >= 0.99


def test_zero_separation_is_chance():
    with T.precision(64):
        full = synth_dataset(4, 2000, 8, seed=0, separation=0.0)
    acc = _linear_probe(full.subset(np.arange(1000)), full.subset(np.arange(1000, 2000)))
    assert abs(acc - 0.25) < 0.06


def test_synth_rejects_single_class():
    with pytest.raises(ValueError):
        synth_dataset(1, 10, 8, 0)


def test_splits_disjoint_fractions_and_deterministic():
    s = make_splits(1000, 200, seed=3)
    assert len(s.search_train) == 500 and len(s.search_val) == 50
    assert not np.intersect1d(s.search_train, s.search_val).size
    assert len(s.eval_train) == 1000 and len(s.test) == 200
    t = make_splits(1000, 200, seed=3)
    assert np.array_equal(s.search_train, t.search_train) and np.array_equal(s.search_val, t.search_val)
    with pytest.raises(ValueError):
        make_splits(10, 1, 0, search_fraction=0.99, val_fraction=0.05)


def test_dataset_validation_and_batches():
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 1, 2, 2)), np.array([0, 5]), 3)
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 2)), np.array([0, 1]), 2)
    ds = Dataset(np.arange(5.0).reshape(5, 1, 1, 1), np.arange(5) % 2, 2)
    sizes = [len(y) for _, y in ds.batches(2)]
    assert sizes == [2, 2, 1]


def test_cutout_zeroes_one_square():
    x = np.ones((4, 3, 10, 10))
    out = cutout(x, 4, np.random.default_rng(0))
    assert np.all(x == 1)
    for s in range(4):
        zeros = (out[s, 0] == 0).sum()
        assert 0 < zeros <= 16
        assert np.all((out[s] == 0) == (out[s, :1] == 0))
