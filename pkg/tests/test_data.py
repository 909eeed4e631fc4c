import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from okddip.data import (
    BadMagicError,
    CountMismatchError,
    DataFormatError,
    Dataset,
    TruncatedFileError,
    augment_batch,
    batch_indices,
    batch_iter,
    channel_stats,
    hflip,
    load_cifar_binary,
    load_idx,
    pad_crop,
    read_cifar_binary,
    read_idx,
    synth_gaussian_mixture,
    write_cifar_binary,
    write_idx,
)


# --- synthetic mixture -----------------------------------------------------

def test_synth_sizes_and_uniform_histogram():
    train, test = synth_gaussian_mixture(10, 500, 16, 2.0, seed=0)
    assert len(train) == 4000 and len(test) == 1000
    assert np.all(np.bincount(train.labels, minlength=10) == 400)
    assert np.all(np.bincount(test.labels, minlength=10) == 100)


def test_synth_desk_split():
    train, test = synth_gaussian_mixture(10, 600, 8, 2.0, seed=0, test_fraction=1 / 6)
    assert (len(train), len(test)) == (5000, 1000)


def test_synth_deterministic():
    a = synth_gaussian_mixture(3, 20, 4, 1.0, seed=5)
    b = synth_gaussian_mixture(3, 20, 4, 1.0, seed=5)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.inputs, y.inputs)
        np.testing.assert_array_equal(x.labels, y.labels)


def test_large_separation_nearest_centroid():
    train, test = synth_gaussian_mixture(10, 200, 16, 40.0, seed=3)
    centroids = np.stack([train.inputs[train.labels == c].mean(axis=0) for c in range(10)])
    d = ((test.inputs[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    assert np.mean(d.argmin(axis=1) == test.labels) > 0.99


def test_synth_rejects_bad_arguments():
    with pytest.raises(ValueError):
        synth_gaussian_mixture(1, 10, 4, 1.0, 0)
    with pytest.raises(ValueError):
        synth_gaussian_mixture(3, 10, 4, 0.0, 0)


def test_train_split_normalized():
    train, test = synth_gaussian_mixture(4, 100, 5, 3.0, seed=2)
    np.testing.assert_allclose(train.inputs.mean(axis=0), 0.0, atol=1e-6)
    np.testing.assert_allclose(train.inputs.std(axis=0), 1.0, atol=1e-6)
    np.testing.assert_array_equal(test.mean, train.mean)
    assert np.all(np.isfinite(test.inputs))


def test_channel_stats_images():
    x = np.random.default_rng(0).random((6, 3, 4, 4))
    mean, std = channel_stats(x)
    np.testing.assert_allclose(mean, x.transpose(1, 0, 2, 3).reshape(3, -1).mean(axis=1))
    assert std.shape == (3,)


def test_dataset_label_range_checked():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3)), np.array([0, 3]), 3, "train", np.zeros(3), np.ones(3))
    with pytest.raises(CountMismatchError):
        Dataset(np.zeros((2, 3)), np.array([0]), 3, "train", np.zeros(3), np.ones(3))


# --- IDX ---------------------------------------------------------------------

def label_bytes(labels):
    return struct.pack(">II", 0x00000801, len(labels)) + bytes(labels)


def test_idx_labels_fixture(tmp_path):
    p = tmp_path / "labels"
    p.write_bytes(b"\x00\x00\x08\x01" + b"\x00\x00\x00\x03" + b"\x00\x01\x02")
    np.testing.assert_array_equal(read_idx(p), [0, 1, 2])


def test_idx_images_fixture_exact_pixels(tmp_path):
    img = tmp_path / "images"
    img.write_bytes(b"\x00\x00\x08\x03" + b"\x00\x00\x00\x02" + b"\x00\x00\x00\x02" + b"\x00\x00\x00\x02"
                    + bytes([0, 51, 102, 255]) + bytes([255, 0, 0, 17]))
    lab = tmp_path / "labels"
    lab.write_bytes(label_bytes([1, 0]))
    raw = read_idx(img)
    np.testing.assert_array_equal(raw, [[[0, 51], [102, 255]], [[255, 0], [0, 17]]])
    ds = load_idx(img, lab, num_classes=2)
    assert ds.inputs.shape == (2, 1, 2, 2)
    recovered = ds.inputs * ds.std[None, :, None, None] + ds.mean[None, :, None, None]
    np.testing.assert_allclose(recovered * 255, raw[:, None], atol=1e-9)


def test_idx_round_trip_bytes(tmp_path):
    arr = np.random.default_rng(0).integers(0, 256, size=(3, 4, 5), dtype=np.uint8)
    p = tmp_path / "x"
    write_idx(p, arr)
    first = p.read_bytes()
    np.testing.assert_array_equal(read_idx(p), arr)
    write_idx(p, read_idx(p))
    assert p.read_bytes() == first


def test_idx_error_kinds(tmp_path):
    bad = tmp_path / "bad"
    bad.write_bytes(struct.pack(">II", 0x00000802, 1) + b"\x00")
    with pytest.raises(BadMagicError):
        read_idx(bad)
    short = tmp_path / "short"
    short.write_bytes(label_bytes([0, 1, 2])[:-1])
    with pytest.raises(TruncatedFileError):
        read_idx(short)
    tiny = tmp_path / "tiny"
    tiny.write_bytes(b"\x00\x00")
    with pytest.raises(TruncatedFileError):
        read_idx(tiny)
    img = tmp_path / "img"
    write_idx(img, np.zeros((2, 2, 2), dtype=np.uint8))
    lab = tmp_path / "lab"
    lab.write_bytes(label_bytes([0, 1, 1]))
    with pytest.raises(CountMismatchError):
        load_idx(img, lab, num_classes=2)
    assert len({BadMagicError, TruncatedFileError, CountMismatchError}) == 3
    assert all(issubclass(e, DataFormatError) for e in (BadMagicError, TruncatedFileError, CountMismatchError))


# --- CIFAR binary ------------------------------------------------------------

def test_cifar_single_record(tmp_path):
    p = tmp_path / "b.bin"
    p.write_bytes(bytes([7]) + bytes([255]) * 3072)
    pixels, labels = read_cifar_binary(p)
    assert labels.tolist() == [7]
    assert np.all(pixels / 255.0 == 1.0)


def test_cifar_empty_file(tmp_path):
    p = tmp_path / "empty.bin"
    p.write_bytes(b"")
    ds = load_cifar_binary(p)
    assert len(ds) == 0 and ds.inputs.shape == (0, 3, 32, 32)


def test_cifar_plane_ordering(tmp_path):
    rec = []
    for label, base in ((3, 10), (9, 100)):
        planes = [bytes([base + ch]) * 1024 for ch in range(3)]
        rec.append(bytes([label]) + b"".join(planes))
    # mark one pixel per plane: row 1, col 2 of each channel
    recs = [bytearray(r) for r in rec]
    for ch in range(3):
        recs[1][1 + ch * 1024 + 1 * 32 + 2] = 200 + ch
    p = tmp_path / "two.bin"
    p.write_bytes(b"".join(recs))
    pixels, labels = read_cifar_binary(p)
    assert labels.tolist() == [3, 9]
    for ch in range(3):
        assert pixels[0, ch, 0, 0] == 10 + ch
        assert pixels[1, ch, 1, 2] == 200 + ch
        assert pixels[1, ch, 0, 0] == 100 + ch


def test_cifar_round_trip_bytes(tmp_path):
    rng = np.random.default_rng(1)
    imgs = rng.integers(0, 256, size=(3, 3, 32, 32), dtype=np.uint8)
    p = tmp_path / "r.bin"
    write_cifar_binary(p, imgs, np.array([0, 5, 9]))
    first = p.read_bytes()
    pixels, labels = read_cifar_binary(p)
    np.testing.assert_array_equal(pixels, imgs)
    write_cifar_binary(p, pixels, labels)
    assert p.read_bytes() == first


def test_cifar_bad_length(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"\x00" * 3074)
    with pytest.raises(DataFormatError, match="3073"):
        read_cifar_binary(p)


# --- augmentation ------------------------------------------------------------

def test_flip_involution_and_center_crop():
    img = np.random.default_rng(2).random((3, 8, 8))
    np.testing.assert_array_equal(hflip(hflip(img)), img)
    np.testing.assert_array_equal(pad_crop(img, 4, 4), img)


def test_crop_shift_hand_case():
    img = np.arange(64, dtype=float).reshape(1, 8, 8)
    out = pad_crop(img, 5, 3)  # shift down-right by (1, -1) relative to centre
    np.testing.assert_array_equal(out[0, :7, 1:], img[0, 1:, :7])
    assert np.all(out[0, 7] == 0) and np.all(out[0, :, 0] == 0)


def test_augment_replay_and_range():
    imgs = np.random.default_rng(3).random((5, 3, 8, 8))
    a = augment_batch(imgs, seed=4, epoch=2)
    np.testing.assert_array_equal(a, augment_batch(imgs, seed=4, epoch=2))
    assert a.shape == imgs.shape
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_augment_keyed_by_index_not_position():
    imgs = np.random.default_rng(5).random((4, 1, 8, 8))
    full = augment_batch(imgs, 1, 0, indices=[10, 11, 12, 13])
    part = augment_batch(imgs[2:], 1, 0, indices=[12, 13])
    np.testing.assert_array_equal(full[2:], part)


def test_augment_rejects_small_images():
    with pytest.raises(ValueError):
        augment_batch(np.zeros((1, 3, 4, 4)), 0)


# --- batching ----------------------------------------------------------------

def test_batch_sizes():
    assert [len(b) for b in batch_indices(10, 4, 0, 0)] == [4, 4, 2]


@given(st.integers(1, 200), st.integers(1, 64), st.integers(0, 1000), st.integers(0, 50))
def test_batches_partition_indices(n, bs, seed, epoch):
    batches = batch_indices(n, bs, seed, epoch)
    flat = np.concatenate(batches)
    assert sorted(flat.tolist()) == list(range(n))
    assert [b.tolist() for b in batches] == [b.tolist() for b in batch_indices(n, bs, seed, epoch)]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000))
def test_batch_iter_yields_matching_pairs(seed):
    train, _ = synth_gaussian_mixture(3, 10, 2, 1.0, seed=0)
    for x, y, idx in batch_iter(train, 7, seed, 1):
        np.testing.assert_array_equal(x, train.inputs[idx])
        np.testing.assert_array_equal(y, train.labels[idx])


def test_batch_size_validated():
    with pytest.raises(ValueError):
        batch_indices(5, 0, 0, 0)
