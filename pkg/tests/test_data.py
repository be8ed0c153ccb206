import hashlib
import os
import struct

import numpy as np
import pytest

from fgfp import data
from fgfp.errors import FormatError, UsageError


# --------------------------------------------------------------------------
# IDX
# --------------------------------------------------------------------------


def _write_corpus(tmp, images_tr, labels_tr, images_te, labels_te):
    data.write_idx_images(os.path.join(tmp, "train-images-idx3-ubyte"), images_tr)
    data.write_idx_labels(os.path.join(tmp, "train-labels-idx1-ubyte"), labels_tr)
    data.write_idx_images(os.path.join(tmp, "t10k-images-idx3-ubyte"), images_te)
    data.write_idx_labels(os.path.join(tmp, "t10k-labels-idx1-ubyte"), labels_te)


def test_idx_round_trip(tmp_path, rng):
    images = rng.integers(0, 256, size=(30, 28, 28), dtype=np.uint8)
    labels = (np.arange(30) % 10).astype(np.uint8)
    _write_corpus(str(tmp_path), images, labels, images[:10], labels[:10])
    train, test = data.load_mnist_idx(str(tmp_path))
    assert train.images.shape == (30, 1, 28, 28)
    assert test.images.shape == (10, 1, 28, 28)
    np.testing.assert_allclose(train.images[:, 0] * 255.0, images, atol=1e-4)
    np.testing.assert_array_equal(train.labels, labels)
    assert train.images.dtype == np.float32
    assert float(train.images.max()) <= 1.0


def test_idx_bad_magic(tmp_path):
    path = os.path.join(tmp_path, "train-images-idx3-ubyte")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", 0xDEADBEEF, 1, 28, 28))
        fh.write(bytes(784))
    data.write_idx_labels(os.path.join(tmp_path, "train-labels-idx1-ubyte"),
                          np.zeros(1, dtype=np.uint8))
    with pytest.raises(FormatError, match="magic"):
        data.load_mnist_idx(str(tmp_path))


def test_idx_truncated_body(tmp_path):
    path = os.path.join(tmp_path, "imgs")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x00000803, 2, 28, 28))
        fh.write(bytes(784))  # only one image's worth
    with pytest.raises(FormatError, match="expected"):
        data._read_idx_images(path)


def test_idx_count_mismatch(tmp_path, rng):
    images = rng.integers(0, 256, size=(5, 28, 28), dtype=np.uint8)
    _write_corpus(str(tmp_path), images, np.zeros(4, dtype=np.uint8),
                  images, np.zeros(5, dtype=np.uint8))
    with pytest.raises(FormatError):
        data.load_mnist_idx(str(tmp_path))


def test_idx_zero_image_stays_zero(tmp_path):
    images = np.zeros((3, 28, 28), dtype=np.uint8)
    labels = np.zeros(3, dtype=np.uint8)
    _write_corpus(str(tmp_path), images, labels, images, labels)
    train, _ = data.load_mnist_idx(str(tmp_path))
    assert not train.images.any()


def test_loader_pure_over_bytes(digit_dir):
    a, _ = data.load_mnist_idx(digit_dir)
    b, _ = data.load_mnist_idx(digit_dir)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.labels, b.labels)


def test_digit_corpus_deterministic(tmp_path):
    d1, d2 = str(tmp_path / "a"), str(tmp_path / "b")
    data.generate_digit_corpus(d1, n_train=40, n_test=10, seed=3)
    data.generate_digit_corpus(d2, n_train=40, n_test=10, seed=3)
    for name in ("train-images-idx3-ubyte", "t10k-labels-idx1-ubyte"):
        h1 = hashlib.sha256(open(os.path.join(d1, name), "rb").read()).hexdigest()
        h2 = hashlib.sha256(open(os.path.join(d2, name), "rb").read()).hexdigest()
        assert h1 == h2


# --------------------------------------------------------------------------
# CIFAR-10 binary
# --------------------------------------------------------------------------


def _write_cifar_dir(tmp, per_batch=200, seed=0):
    rng = np.random.default_rng(seed)
    for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        records = np.empty((per_batch, 3073), dtype=np.uint8)
        records[:, 0] = np.arange(per_batch) % 10
        records[:, 1:] = rng.integers(0, 256, size=(per_batch, 3072), dtype=np.uint8)
        with open(os.path.join(tmp, name), "wb") as fh:
            fh.write(records.tobytes())
    return per_batch


def test_cifar_well_formed_file_of_10000_records(tmp_path, rng):
    records = np.empty((10000, 3073), dtype=np.uint8)
    records[:, 0] = np.arange(10000) % 10
    records[:, 1:] = rng.integers(0, 256, size=(10000, 3072), dtype=np.uint8)
    path = os.path.join(tmp_path, "batch.bin")
    with open(path, "wb") as fh:
        fh.write(records.tobytes())
    pixels, labels = data._read_cifar_file(path)
    assert pixels.shape == (10000, 3, 32, 32)
    assert labels.shape == (10000,)
    # planes are R,G,B row-major: record byte 1 is R[0,0]
    np.testing.assert_allclose(pixels[0, 0, 0, 0], records[0, 1] / 255.0, rtol=1e-6)


def test_cifar_load_directory(tmp_path):
    n = _write_cifar_dir(str(tmp_path), per_batch=120)
    train, test = data.load_cifar10(str(tmp_path))
    assert len(train) == 5 * n and len(test) == n
    assert train.images.shape[1:] == (3, 32, 32)


def test_cifar_truncated_file_reports_offset(tmp_path):
    _write_cifar_dir(str(tmp_path), per_batch=10)
    path = os.path.join(tmp_path, "data_batch_3.bin")
    with open(path, "ab") as fh:
        fh.write(b"xx")  # 2 trailing bytes
    with pytest.raises(FormatError, match="multiple of 3073"):
        data.load_cifar10(str(tmp_path))


def test_cifar_label_out_of_range(tmp_path):
    _write_cifar_dir(str(tmp_path), per_batch=10)
    path = os.path.join(tmp_path, "data_batch_1.bin")
    raw = bytearray(open(path, "rb").read())
    raw[0] = 10
    open(path, "wb").write(bytes(raw))
    with pytest.raises(FormatError, match="label"):
        data.load_cifar10(str(tmp_path))


def test_cifar_missing_file(tmp_path):
    _write_cifar_dir(str(tmp_path), per_batch=10)
    os.unlink(os.path.join(tmp_path, "test_batch.bin"))
    with pytest.raises(FormatError, match="missing"):
        data.load_cifar10(str(tmp_path))


# --------------------------------------------------------------------------
# splits / normalization / batches
# --------------------------------------------------------------------------


def _balanced_dataset(n, num_classes=10):
    labels = np.arange(n, dtype=np.int64) % num_classes
    images = np.zeros((n, 1, 1, 1), dtype=np.float32)
    return data.Dataset(images, labels, "train", num_classes)


def test_split_canonical_cifar_sizes():
    # 50K balanced -> exactly 4500/500 per class at the default fraction
    ds = _balanced_dataset(50000)
    tr, val = data.split_train_val(ds, seed=0)
    assert len(tr) == 45000 and len(val) == 5000
    for cls in range(10):
        assert int((tr.labels == cls).sum()) == 4500
        assert int((val.labels == cls).sum()) == 500


def test_split_deterministic_and_seed_sensitive():
    ds = _balanced_dataset(1000)
    tr1, val1 = data.split_train_val(ds, seed=4)
    tr2, val2 = data.split_train_val(ds, seed=4)
    tr3, _ = data.split_train_val(ds, seed=5)
    assert np.array_equal(val1.labels, val2.labels)
    assert np.array_equal(tr1.images, tr2.images)
    assert not np.array_equal(tr1.labels, tr3.labels) or not np.array_equal(
        tr1.images, tr3.images
    )


def test_split_partitions_dataset(rng):
    images = rng.random((200, 1, 2, 2), dtype=np.float32)
    ds = data.Dataset(images, np.arange(200, dtype=np.int64) % 10, "train")
    tr, val = data.split_train_val(ds, seed=1)
    together = np.concatenate([tr.images, val.images]).reshape(200, -1)
    original = images.reshape(200, -1)
    assert sorted(map(tuple, together)) == sorted(map(tuple, original))


def test_standardize_uses_reference_stats_only(rng):
    ref = data.Dataset(rng.normal(2.0, 3.0, size=(500, 3, 4, 4)).astype(np.float32),
                       np.zeros(500, dtype=np.int64), "train")
    other = data.Dataset(rng.normal(-1.0, 0.5, size=(100, 3, 4, 4)).astype(np.float32),
                         np.zeros(100, dtype=np.int64), "test")
    (mean, std), ref2, other2 = data.standardize(ref, other)
    np.testing.assert_allclose(ref2.images.mean(axis=(0, 2, 3)), 0.0, atol=1e-3)
    np.testing.assert_allclose(ref2.images.std(axis=(0, 2, 3)), 1.0, atol=1e-3)
    # the other split is transformed by the reference stats, not its own
    np.testing.assert_allclose(
        other2.images, (other.images - mean.astype(np.float32)[None, :, None, None])
        / std.astype(np.float32)[None, :, None, None], rtol=1e-5
    )


def test_batch_iter_is_permutation(rng):
    images = rng.random((37, 1, 2, 2), dtype=np.float32)
    ds = data.Dataset(images, np.arange(37, dtype=np.int64) % 10, "train")
    seen = []
    for x, y in data.batch_iter(ds, 8, seed=3, epoch=0):
        assert x.shape[0] == y.shape[0] <= 8
        seen.append(x)
    got = np.concatenate(seen).reshape(37, -1)
    assert sorted(map(tuple, got)) == sorted(map(tuple, images.reshape(37, -1)))


def test_batch_iter_seeded_reproducible(rng):
    images = rng.random((20, 1, 2, 2), dtype=np.float32)
    ds = data.Dataset(images, np.zeros(20, dtype=np.int64), "train")
    a = [x for x, _ in data.batch_iter(ds, 4, seed=9, epoch=2)]
    b = [x for x, _ in data.batch_iter(ds, 4, seed=9, epoch=2)]
    c = [x for x, _ in data.batch_iter(ds, 4, seed=9, epoch=3)]
    assert all(np.array_equal(p, q) for p, q in zip(a, b))
    assert any(not np.array_equal(p, q) for p, q in zip(a, c))


def test_batch_iter_rejects_bad_batch_size():
    ds = _balanced_dataset(10)
    with pytest.raises(UsageError):
        list(data.batch_iter(ds, 0))


def test_augment_cifar_shape_and_determinism(rng):
    x = rng.random((6, 3, 32, 32), dtype=np.float32)
    from fgfp.ndcore import substream

    out1 = data.augment_cifar(x, substream(1, "aug"))
    out2 = data.augment_cifar(x, substream(1, "aug"))
    assert out1.shape == x.shape
    np.testing.assert_array_equal(out1, out2)
    assert not np.array_equal(out1, x)  # jitter actually happened


def test_dataset_label_range_validation():
    with pytest.raises(FormatError):
        data.Dataset(np.zeros((2, 1, 1, 1), dtype=np.float32),
                     np.array([0, 10]), "train", 10)
