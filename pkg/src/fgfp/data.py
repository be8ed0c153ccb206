"""Dataset ingestion: MNIST-format IDX files, CIFAR-10 binary batches,
deterministic splits, batch iteration, and light augmentation.

Loaders are pure over file bytes. All randomness (splits, batch order,
augmentation, corpus synthesis) flows from named substreams of a single
seed, so any stage can be reproduced in isolation.

The module also ships a procedural digit-glyph corpus writer
(`generate_digit_corpus`): ten stroke-rendered digit classes with
randomized affine jitter and noise, written as standard IDX files. It
exists so desk-scale experiments run in environments where the real
MNIST files cannot be fetched; the loader path is identical either way.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, UsageError
from .ndcore import substream

__all__ = [
    "Dataset",
    "load_mnist_idx",
    "load_cifar10",
    "split_train_val",
    "standardize",
    "batch_iter",
    "augment_cifar",
    "write_idx_images",
    "write_idx_labels",
    "generate_digit_corpus",
]

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Images [N, C, H, W] float32 plus integer labels and a split tag."""

    images: np.ndarray
    labels: np.ndarray
    split: str
    num_classes: int = 10

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise FormatError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise FormatError(
                f"labels outside [0, {self.num_classes}): "
                f"min {self.labels.min()}, max {self.labels.max()}"
            )

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices, split: str | None = None) -> "Dataset":
        return Dataset(
            self.images[indices],
            self.labels[indices],
            split or self.split,
            self.num_classes,
        )


# --------------------------------------------------------------------------
# IDX (MNIST layout)
# --------------------------------------------------------------------------


def _read_idx_images(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16:
            raise FormatError(f"{path}: truncated IDX header")
        magic, n, rows, cols = struct.unpack(">IIII", head)
        if magic != _IDX_IMAGES_MAGIC:
            raise FormatError(f"{path}: bad magic 0x{magic:08x}, want 0x{_IDX_IMAGES_MAGIC:08x}")
        body = fh.read()
    expected = n * rows * cols
    if len(body) != expected:
        raise FormatError(f"{path}: expected {expected} pixel bytes, got {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(n, rows, cols)


def _read_idx_labels(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8:
            raise FormatError(f"{path}: truncated IDX header")
        magic, n = struct.unpack(">II", head)
        if magic != _IDX_LABELS_MAGIC:
            raise FormatError(f"{path}: bad magic 0x{magic:08x}, want 0x{_IDX_LABELS_MAGIC:08x}")
        body = fh.read()
    if len(body) != n:
        raise FormatError(f"{path}: expected {n} label bytes, got {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).astype(np.int64)


def write_idx_images(path: str, images: np.ndarray):
    """Write [N, H, W] uint8 images in big-endian IDX3 layout."""
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", _IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())


def write_idx_labels(path: str, labels: np.ndarray):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", _IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def load_mnist_idx(directory: str) -> tuple[Dataset, Dataset]:
    """Load train/test IDX files (standard MNIST names) from a directory.

    Pixels come back as float32 in [0, 1], shaped [N, 1, 28, 28].
    """
    def one(split, img_name, lab_name):
        img_path = os.path.join(directory, img_name)
        lab_path = os.path.join(directory, lab_name)
        if not os.path.exists(img_path) or not os.path.exists(lab_path):
            raise FormatError(f"missing IDX files {img_name}/{lab_name} in {directory}")
        images = _read_idx_images(img_path)
        labels = _read_idx_labels(lab_path)
        if images.shape[0] != labels.shape[0]:
            raise FormatError(
                f"{split}: {images.shape[0]} images vs {labels.shape[0]} labels"
            )
        floats = (images.astype(np.float32) / 255.0)[:, None, :, :]
        return Dataset(np.ascontiguousarray(floats), labels, split)

    train = one("train", "train-images-idx3-ubyte", "train-labels-idx1-ubyte")
    test = one("test", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
    return train, test


# --------------------------------------------------------------------------
# CIFAR-10 binary v1
# --------------------------------------------------------------------------

_CIFAR_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes
_CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
_CIFAR_TEST_FILE = "test_batch.bin"


def _read_cifar_file(path: str) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) % _CIFAR_RECORD != 0:
        raise FormatError(
            f"{path}: {len(raw)} bytes is not a multiple of {_CIFAR_RECORD} "
            f"(trailing {len(raw) % _CIFAR_RECORD} bytes at offset "
            f"{len(raw) - len(raw) % _CIFAR_RECORD})"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise FormatError(f"{path}: label {labels[bad]} out of range at record {bad}")
    pixels = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return pixels, labels


def load_cifar10(directory: str) -> tuple[Dataset, Dataset]:
    """Load the CIFAR-10 binary batches; pixels scaled to [0, 1].

    Per-channel standardization is applied separately (`standardize`)
    once the train/val split exists, because its statistics must come
    from the training subset only.
    """
    for name in _CIFAR_TRAIN_FILES + [_CIFAR_TEST_FILE]:
        if not os.path.exists(os.path.join(directory, name)):
            raise FormatError(f"missing CIFAR-10 batch file {name} in {directory}")
    img_parts, lab_parts = [], []
    for name in _CIFAR_TRAIN_FILES:
        imgs, labs = _read_cifar_file(os.path.join(directory, name))
        img_parts.append(imgs)
        lab_parts.append(labs)
    train = Dataset(np.concatenate(img_parts), np.concatenate(lab_parts), "train")
    timgs, tlabs = _read_cifar_file(os.path.join(directory, _CIFAR_TEST_FILE))
    test = Dataset(timgs, tlabs, "test")
    return train, test


# --------------------------------------------------------------------------
# Splits and normalization
# --------------------------------------------------------------------------


def split_train_val(
    train: Dataset, seed: int, val_fraction: float = 0.1
) -> tuple[Dataset, Dataset]:
    """Deterministic class-stratified partition of a training set.

    With the canonical 50K CIFAR-10 set and the default fraction this is
    the 45K/5K split, exactly 4500/500 per class.
    """
    rng = substream(seed, "train-val-split")
    train_idx, val_idx = [], []
    for cls in range(train.num_classes):
        cls_idx = np.flatnonzero(train.labels == cls)
        perm = cls_idx[rng.permutation(cls_idx.size)]
        n_val = int(round(val_fraction * cls_idx.size))
        val_idx.append(perm[:n_val])
        train_idx.append(perm[n_val:])
    train_idx = np.sort(np.concatenate(train_idx))
    val_idx = np.sort(np.concatenate(val_idx))
    return train.subset(train_idx, "train"), train.subset(val_idx, "val")


def standardize(reference: Dataset, *others: Dataset):
    """Per-channel standardization with statistics from `reference` only.

    Returns (stats, reference', others'...) where stats is (mean, std)
    per channel. Keeping the statistics off the validation and test
    splits avoids leaking them into training decisions.
    """
    mean = reference.images.mean(axis=(0, 2, 3), dtype=np.float64)
    std = reference.images.std(axis=(0, 2, 3), dtype=np.float64)
    std = np.where(std < 1e-8, 1.0, std)
    m = mean.astype(np.float32)[None, :, None, None]
    s = std.astype(np.float32)[None, :, None, None]

    def apply(ds: Dataset) -> Dataset:
        return Dataset(
            (ds.images - m) / s, ds.labels, ds.split, ds.num_classes
        )

    return (mean, std), apply(reference), *[apply(ds) for ds in others]


def batch_iter(
    ds: Dataset,
    batch_size: int,
    seed: int | None = None,
    epoch: int = 0,
    augment=None,
):
    """Yield (images, labels) batches; seeded shuffle when seed is given.

    The concatenation of one epoch's batches is exactly a permutation of
    the dataset (the permutation depends only on (seed, epoch)).
    """
    if batch_size < 1:
        raise UsageError(f"batch_size must be >= 1, got {batch_size}")
    n = len(ds)
    if seed is None:
        order = np.arange(n)
    else:
        order = substream(seed, "batch-order", str(epoch)).permutation(n)
    aug_rng = (
        substream(seed, "augment", str(epoch)) if seed is not None else None
    )
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        x = ds.images[idx]
        if augment is not None:
            x = augment(x, aug_rng)
        yield x, ds.labels[idx]


def augment_cifar(x: np.ndarray, rng) -> np.ndarray:
    """4-pixel pad + random 32x32 crop + horizontal flip, per sample."""
    n, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (4, 4), (4, 4)))
    out = np.empty_like(x)
    offs = rng.integers(0, 9, size=(n, 2))
    flips = rng.random(n) < 0.5
    for i in range(n):
        dy, dx = offs[i]
        crop = padded[i, :, dy : dy + h, dx : dx + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


# --------------------------------------------------------------------------
# Procedural digit corpus
# --------------------------------------------------------------------------


def _arc(cx, cy, rx, ry, deg0, deg1, n=14):
    ang = np.radians(np.linspace(deg0, deg1, n))
    return np.stack([cx + rx * np.cos(ang), cy + ry * np.sin(ang)], axis=1)


def _line(x0, y0, x1, y1):
    return np.array([[x0, y0], [x1, y1]])


def _digit_strokes() -> dict[int, list[np.ndarray]]:
    # Unit-square polylines, x to the right and y downward.
    return {
        0: [_arc(0.5, 0.5, 0.21, 0.31, 0, 360)],
        1: [_line(0.36, 0.30, 0.55, 0.16), _line(0.55, 0.16, 0.55, 0.84)],
        2: [
            np.concatenate(
                [
                    _arc(0.5, 0.34, 0.18, 0.17, -160, 20),
                    _line(0.64, 0.45, 0.32, 0.80),
                    _line(0.32, 0.80, 0.72, 0.80),
                ]
            )
        ],
        3: [_arc(0.47, 0.33, 0.17, 0.16, -140, 90), _arc(0.47, 0.66, 0.19, 0.18, -90, 140)],
        4: [
            _line(0.60, 0.16, 0.28, 0.62),
            _line(0.28, 0.62, 0.78, 0.62),
            _line(0.60, 0.16, 0.60, 0.86),
        ],
        5: [
            _line(0.68, 0.17, 0.36, 0.17),
            _line(0.36, 0.17, 0.33, 0.46),
            _arc(0.48, 0.63, 0.19, 0.20, -110, 150),
        ],
        6: [
            np.concatenate(
                [_line(0.62, 0.14, 0.45, 0.32), _line(0.45, 0.32, 0.37, 0.52)]
            ),
            _arc(0.5, 0.65, 0.16, 0.17, 0, 360),
        ],
        7: [_line(0.30, 0.17, 0.72, 0.17), _line(0.72, 0.17, 0.44, 0.85)],
        8: [_arc(0.5, 0.33, 0.15, 0.15, 0, 360), _arc(0.5, 0.67, 0.18, 0.17, 0, 360)],
        9: [_arc(0.50, 0.35, 0.16, 0.16, 0, 360), _line(0.66, 0.38, 0.62, 0.85)],
    }


_STROKES = _digit_strokes()


def _render_digit(digit: int, rng, size: int = 28) -> np.ndarray:
    angle = rng.uniform(-0.20, 0.20)
    scale = rng.uniform(0.85, 1.12)
    shear = rng.uniform(-0.12, 0.12)
    tx, ty = rng.uniform(-0.06, 0.06, size=2)
    thick = rng.uniform(0.045, 0.075)
    soft = 0.018

    cos_a, sin_a = np.cos(angle), np.sin(angle)
    rot = np.array([[cos_a, -sin_a], [sin_a, cos_a]])
    shear_m = np.array([[1.0, shear], [0.0, 1.0]])
    xform = scale * (rot @ shear_m)

    coords = np.linspace(0.5 / size, 1.0 - 0.5 / size, size)
    px, py = np.meshgrid(coords, coords, indexing="xy")
    pts = np.stack([px.ravel(), py.ravel()], axis=1)

    dist = np.full(pts.shape[0], np.inf)
    for poly in _STROKES[digit]:
        tp = (poly - 0.5) @ xform.T + 0.5 + np.array([tx, ty])
        a, b = tp[:-1], tp[1:]
        ab = b - a
        denom = np.maximum((ab * ab).sum(axis=1), 1e-12)
        ap = pts[:, None, :] - a[None, :, :]
        t = np.clip((ap * ab[None, :, :]).sum(axis=2) / denom[None, :], 0.0, 1.0)
        nearest = a[None, :, :] + t[:, :, None] * ab[None, :, :]
        d = np.linalg.norm(pts[:, None, :] - nearest, axis=2)
        dist = np.minimum(dist, d.min(axis=1))

    ink = 1.0 / (1.0 + np.exp((dist - thick) / soft))
    img = ink.reshape(size, size)
    img = img + rng.normal(0.0, 0.035, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_digit_corpus(
    directory: str, n_train: int = 12000, n_test: int = 2000, seed: int = 7
):
    """Render a 10-class digit-glyph corpus and write it as IDX files.

    Output uses the standard MNIST file names, so `load_mnist_idx` on
    the same directory returns it. Class sequence is round-robin, and
    every image depends only on (seed, split, index).
    """
    os.makedirs(directory, exist_ok=True)
    for split, count, img_name, lab_name in (
        ("train", n_train, "train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        ("test", n_test, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    ):
        labels = np.arange(count, dtype=np.int64) % 10
        images = np.empty((count, 28, 28), dtype=np.uint8)
        for i in range(count):
            rng = substream(seed, "digits", split, str(i))
            images[i] = np.round(_render_digit(int(labels[i]), rng) * 255.0)
        write_idx_images(os.path.join(directory, img_name), images)
        write_idx_labels(os.path.join(directory, lab_name), labels.astype(np.uint8))
