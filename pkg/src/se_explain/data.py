"""Readers for the CIFAR binary and MNIST IDX formats, plus augmentation."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DATA_DIR_ENV = "SE_EXPLAIN_DATA_DIR"

CIFAR_IMAGE_BYTES = 3 * 32 * 32
CIFAR10_RECORD = 1 + CIFAR_IMAGE_BYTES
CIFAR100_RECORD = 2 + CIFAR_IMAGE_BYTES
CIFAR10_BATCH_BYTES = 10_000 * CIFAR10_RECORD  # 30 730 000

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataParseError(ValueError):
    """Malformed dataset file. ``offset`` is the byte position of the fault."""

    def __init__(self, message, path=None, offset=None, record=None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte {offset}")
        if record is not None:
            where.append(f"record {record}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.path, self.offset, self.record = path, offset, record


class DatasetNotFound(FileNotFoundError):
    pass


@dataclass
class LabeledImage:
    label: int
    pixels: np.ndarray  # (C, H, W) float32 in [0, 1]


@dataclass
class DatasetSplit:
    """Images kept as uint8 (N, C, H, W); converted to floats on access."""

    images: np.ndarray
    labels: np.ndarray
    split: str
    num_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> LabeledImage:
        return LabeledImage(int(self.labels[i]), self.image(i))

    def image(self, i):
        return self.images[i].astype(np.float32) / 255.0

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def batches(self, batch_size, order=None):
        order = np.arange(len(self)) if order is None else order
        for lo in range(0, len(order), batch_size):
            idx = order[lo:lo + batch_size]
            yield self.images[idx].astype(np.float32) / 255.0, self.labels[idx]

    def subset(self, indices):
        indices = np.asarray(indices)
        return DatasetSplit(self.images[indices], self.labels[indices], self.split, self.num_classes)

    def channel_stats(self):
        """Per-channel mean and std of the [0, 1] pixels, in float64."""
        n, c = self.images.shape[:2]
        total = np.zeros(c)
        total_sq = np.zeros(c)
        count = 0
        for lo in range(0, n, 4096):
            block = self.images[lo:lo + 4096].astype(np.float64) / 255.0
            total += block.sum(axis=(0, 2, 3))
            total_sq += (block * block).sum(axis=(0, 2, 3))
            count += block.shape[0] * block.shape[2] * block.shape[3]
        mean = total / count
        std = np.sqrt(np.maximum(total_sq / count - mean * mean, 0.0))
        return mean, std


# ------------------------------------------------------------------- CIFAR


def _parse_cifar_bytes(buf, path, label_bytes, label_offset, num_classes, strict_size):
    record = label_bytes + CIFAR_IMAGE_BYTES
    if strict_size is not None and len(buf) != strict_size:
        raise DataParseError(
            f"batch file must be exactly {strict_size} bytes, got {len(buf)}", path, len(buf)
        )
    if len(buf) == 0:
        raise DataParseError("empty batch file", path, 0)
    if len(buf) % record:
        n_full = len(buf) // record
        raise DataParseError(
            f"file truncated inside a {record}-byte record", path, n_full * record, n_full
        )
    arr = np.frombuffer(buf, dtype=np.uint8).reshape(-1, record)
    labels = arr[:, label_offset].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        r = int(bad[0])
        raise DataParseError(
            f"label {labels[r]} outside [0, {num_classes})", path, r * record + label_offset, r
        )
    images = arr[:, label_bytes:].reshape(-1, 3, 32, 32).copy()
    return images, labels


def parse_cifar10(paths, split="train", strict=False) -> DatasetSplit:
    """Concatenate CIFAR-10 binary batches.

    Each record is one label byte and 3072 pixel bytes (R, G, B planes of
    1024 row-major pixels). With ``strict`` every file must be a full
    10 000-record batch.
    """
    return _parse_cifar(paths, split, 1, 0, 10, CIFAR10_BATCH_BYTES if strict else None)


def parse_cifar100(paths, split="train") -> DatasetSplit:
    """CIFAR-100 batches; the fine label (second byte) is used."""
    return _parse_cifar(paths, split, 2, 1, 100, None)


def _parse_cifar(paths, split, label_bytes, label_offset, num_classes, strict_size):
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    images, labels = [], []
    for p in paths:
        buf = Path(p).read_bytes()
        im, lb = _parse_cifar_bytes(buf, p, label_bytes, label_offset, num_classes, strict_size)
        images.append(im)
        labels.append(lb)
    if not images:
        raise DataParseError("no batch files given")
    return DatasetSplit(np.concatenate(images), np.concatenate(labels), split, num_classes)


def serialize_cifar(split: DatasetSplit, label_bytes=1) -> bytes:
    n = len(split)
    rec = np.zeros((n, label_bytes + CIFAR_IMAGE_BYTES), dtype=np.uint8)
    rec[:, label_bytes - 1] = split.labels
    rec[:, label_bytes:] = split.images.reshape(n, -1)
    return rec.tobytes()


# --------------------------------------------------------------------- IDX


def _idx_header(buf, path, magic, ndim):
    need = 4 + 4 * ndim
    if len(buf) >= 4:
        got = struct.unpack(">I", buf[:4])[0]
        if got != magic:
            raise DataParseError(f"bad IDX magic 0x{got:08x}, expected 0x{magic:08x}", path, 0)
    if len(buf) < need:
        raise DataParseError("file shorter than its IDX header", path, len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:need])
    return dims, need


def parse_mnist_idx(images_path, labels_path, split="train") -> DatasetSplit:
    ibuf = Path(images_path).read_bytes()
    lbuf = Path(labels_path).read_bytes()
    (n, rows, cols), off = _idx_header(ibuf, images_path, IDX_IMAGES_MAGIC, 3)
    (n_labels,), loff = _idx_header(lbuf, labels_path, IDX_LABELS_MAGIC, 1)
    if n != n_labels:
        raise DataParseError(f"{n} images but {n_labels} labels", labels_path, 4)
    if rows == 0 or cols == 0:
        raise DataParseError("zero image extent", images_path, 8)
    expect = off + n * rows * cols
    if len(ibuf) != expect:
        raise DataParseError(f"image file should be {expect} bytes, got {len(ibuf)}", images_path,
                             min(len(ibuf), expect))
    if len(lbuf) != loff + n:
        raise DataParseError(f"label file should be {loff + n} bytes, got {len(lbuf)}", labels_path,
                             min(len(lbuf), loff + n))
    labels = np.frombuffer(lbuf, dtype=np.uint8, offset=loff).astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DataParseError(f"label {labels[bad[0]]} outside [0, 10)", labels_path,
                             loff + int(bad[0]), int(bad[0]))
    images = np.frombuffer(ibuf, dtype=np.uint8, offset=off).reshape(n, 1, rows, cols).copy()
    return DatasetSplit(images, labels, split, 10)


def serialize_idx(split: DatasetSplit):
    n, c, h, w = split.images.shape
    if c != 1:
        raise ValueError("IDX images are single-channel")
    images = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + split.images.astype(np.uint8).tobytes()
    labels = struct.pack(">II", IDX_LABELS_MAGIC, n) + split.labels.astype(np.uint8).tobytes()
    return images, labels


# ------------------------------------------------------------- dataset dirs


CIFAR10_SUBDIR = "cifar-10-batches-bin"
CIFAR100_SUBDIR = "cifar-100-binary"
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def default_data_dir():
    return Path(os.environ.get(DATA_DIR_ENV, "data"))


def _locate(root, subdir, names):
    root = Path(root)
    for base in (root / subdir, root):
        if all((base / n).is_file() for n in names):
            return [base / n for n in names]
    raise DatasetNotFound(f"could not find {', '.join(names)} under {root}")


def load_dataset(name, root=None, split="train") -> DatasetSplit:
    """Load ``cifar10``, ``cifar100`` or ``mnist`` from ``root``
    (default: ``$SE_EXPLAIN_DATA_DIR``)."""
    root = default_data_dir() if root is None else Path(root)
    if split not in ("train", "test"):
        raise ValueError(f"unknown split {split!r}")
    if name == "cifar10":
        names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
        return parse_cifar10(_locate(root, CIFAR10_SUBDIR, names), split)
    if name == "cifar100":
        return parse_cifar100(_locate(root, CIFAR100_SUBDIR, [f"{split}.bin"]), split)
    if name == "mnist":
        names = MNIST_FILES[split]
        found = None
        for variant in (names, tuple(n.replace("-idx", ".idx") for n in names)):
            try:
                found = _locate(root, "mnist", list(variant))
                break
            except DatasetNotFound:
                continue
        if found is None:
            raise DatasetNotFound(f"could not find MNIST {split} files under {root}")
        return parse_mnist_idx(*found, split=split)
    raise ValueError(f"unknown dataset {name!r}")


# ---------------------------------------------------- augmentation & scaling


def hflip(image):
    return image[..., ::-1].copy()


def reflect_pad_crop(image, top, left, pad=4):
    """Reflect-pad by ``pad`` and cut an original-sized window at (top, left)."""
    _, h, w = image.shape
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
    return padded[:, top:top + h, left:left + w].copy()


def augment(image, rng, pad=4, flip=None, offset=None):
    """Random horizontal flip (p = 0.5) then reflect-pad-4 random crop.

    ``flip``/``offset`` force the random choices.
    """
    if flip is None:
        flip = rng.random() < 0.5
    if offset is None:
        offset = tuple(rng.integers(0, 2 * pad + 1, size=2))
    out = hflip(image) if flip else image
    return reflect_pad_crop(out, offset[0], offset[1], pad)


def augment_batch(images, rng, pad=4):
    n, _, h, w = images.shape
    flips = rng.random(n) < 0.5
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
    out = np.empty_like(images)
    for i in range(n):
        t, l = offsets[i]
        src = padded[i, :, :, ::-1] if flips[i] else padded[i]
        out[i] = src[:, t:t + h, l:l + w]
    return out


def _channel_view(stats, ndim):
    stats = np.asarray(stats, dtype=np.float64)
    return stats.reshape((1, -1, 1, 1) if ndim == 4 else (-1, 1, 1))


def normalize(image, mean, std):
    """Per-channel ``(x - mean) / std`` for (C, H, W) or (N, C, H, W)."""
    if np.any(np.asarray(std) <= 0):
        raise ValueError("std must be positive")
    nd = np.ndim(image)
    return (image - _channel_view(mean, nd)) / _channel_view(std, nd)


def denormalize(image, mean, std):
    nd = np.ndim(image)
    return image * _channel_view(std, nd) + _channel_view(mean, nd)


# ------------------------------------------------------------ synthetic data


def synthetic_shapes(n, seed=0, size=32, channels=3, num_classes=10, split="train"):
    """Labelled toy images: a class-specific coloured blob on noisy clutter.

    Useful where the real datasets are unavailable; the object occupies a
    small random region, so a good explanation must localise it.
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=n)
    palette = np.random.default_rng(12345).uniform(0.2, 1.0, size=(num_classes, channels))
    yy, xx = np.mgrid[0:size, 0:size]
    images = np.empty((n, channels, size, size), dtype=np.uint8)
    r = size / 6
    for i in range(n):
        bg = rng.uniform(0.0, 0.35, size=(channels, size, size))
        cy, cx = rng.uniform(r, size - r, size=2)
        k = labels[i]
        if k % 2 == 0:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:
            mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r * 0.6)
        img = bg
        img[:, mask] = palette[k][:, None]
        images[i] = np.clip(np.floor(img * 255 + 0.5), 0, 255).astype(np.uint8)
    return DatasetSplit(images, labels.astype(np.int64), split, num_classes)
