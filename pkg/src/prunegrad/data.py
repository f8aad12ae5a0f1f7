"""Datasets: CIFAR-10 binary records, a synthetic shapes set, pixel removal."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

RECORD = 3073
CIFAR_TRAIN = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST = ("test_batch.bin",)
SHAPE_NAMES = ("square", "disk", "plus", "triangle", "ring",
               "hbar", "vbar", "diamond", "cross", "frame")


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # N x C x H x W, float64 in [0, 1]
    labels: np.ndarray  # N, int64
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be N x C x H x W, got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and not (self.images.min() >= 0.0 and self.images.max() <= 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        if np.any(self.labels < 0):
            raise ValueError("labels must be nonnegative")

    def __len__(self):
        return len(self.labels)

    def subset(self, n: int | None = None, start: int = 0) -> "Dataset":
        stop = None if n is None else start + n
        return Dataset(self.images[start:stop], self.labels[start:stop], self.split)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0


def round_half_up(x) -> int:
    return int(np.floor(x + 0.5))


# --------------------------------------------------------------------------
# CIFAR-10 binary layout: 1 label byte + 3072 pixel bytes (R plane, G, B)


def decode_cifar_records(buf: bytes, source: str = "<bytes>"):
    if len(buf) % RECORD:
        raise DataFormatError(f"{source}: size {len(buf)} is not a multiple of {RECORD}")
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, RECORD)
    labels = rec[:, 0].astype(np.int64)
    if np.any(labels > 9):
        bad = int(np.argmax(labels > 9))
        raise DataFormatError(f"{source}: record {bad} has label {labels[bad]}, expected 0-9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return images, labels


def read_cifar_file(path) -> Dataset:
    images, labels = decode_cifar_records(Path(path).read_bytes(), str(path))
    return Dataset(images, labels, Path(path).stem)


def load_cifar10_binary(directory, max_train: int | None = None,
                        max_test: int | None = None) -> tuple[Dataset, Dataset]:
    """Read the standard ``cifar-10-batches-bin`` directory into (train, test)."""
    directory = Path(directory)

    def load(names, split, limit):
        imgs, labs = [], []
        for name in names:
            p = directory / name
            if not p.exists():
                raise FileNotFoundError(f"missing CIFAR-10 batch file {p}")
            i, l = decode_cifar_records(p.read_bytes(), str(p))
            imgs.append(i)
            labs.append(l)
            if limit is not None and sum(map(len, labs)) >= limit:
                break
        ds = Dataset(np.concatenate(imgs), np.concatenate(labs), split)
        return ds.subset(limit) if limit is not None else ds

    return load(CIFAR_TRAIN, "train", max_train), load(CIFAR_TEST, "test", max_test)


def encode_cifar_records(images, labels) -> bytes:
    images = np.asarray(images)
    labels = np.asarray(labels)
    if np.any(labels < 0) or np.any(labels > 255):
        raise DataFormatError("labels must fit in one byte")
    pix = np.clip(np.floor(images * 255.0 + 0.5), 0, 255).astype(np.uint8)
    rec = np.concatenate([labels.astype(np.uint8)[:, None], pix.reshape(len(pix), -1)], axis=1)
    return rec.tobytes()


def write_dataset(dataset: Dataset, path) -> None:
    """Persist in the CIFAR record layout (pixels re-quantised to bytes).

    The shape is not stored; a 3x32x32 layout is assumed unless the dataset
    is read back with :func:`read_dataset` and an explicit ``shape``.
    """
    Path(path).write_bytes(encode_cifar_records(dataset.images, dataset.labels))


def read_dataset(path, shape=(3, 32, 32), split="train") -> Dataset:
    buf = Path(path).read_bytes()
    size = 1 + int(np.prod(shape))
    if len(buf) % size:
        raise DataFormatError(f"{path}: size {len(buf)} is not a multiple of {size}")
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, size)
    images = rec[:, 1:].reshape((-1,) + tuple(shape)).astype(np.float64) / 255.0
    return Dataset(images, rec[:, 0].astype(np.int64), split)


# --------------------------------------------------------------------------
# synthetic shapes


def _shape_mask(kind, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    ay, ax = np.abs(dy), np.abs(dx)
    t = r / 3.0
    if kind == 0:
        return np.maximum(ay, ax) <= r
    if kind == 1:
        return dy * dy + dx * dx <= r * r
    if kind == 2:
        return ((ay <= t) & (ax <= r)) | ((ax <= t) & (ay <= r))
    if kind == 3:
        return (ay <= r) & (ax <= (dy + r) / 2.0)
    if kind == 4:
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.5 * r) ** 2)
    if kind == 5:
        return (ay <= t) & (ax <= r)
    if kind == 6:
        return (ax <= t) & (ay <= r)
    if kind == 7:
        return ay + ax <= r
    if kind == 8:
        return (np.abs(ay - ax) <= t) & (np.maximum(ay, ax) <= r)
    if kind == 9:
        m = np.maximum(ay, ax)
        return (m <= r) & (m >= 0.55 * r)
    raise ValueError(kind)


def generate_shapes(seed: int, n: int, size: int = 32, classes: int = 10,
                    channels: int = 3, split: str = "train") -> Dataset:
    """One coloured shape per image on a noisy background.

    The class is the shape kind (see ``SHAPE_NAMES``). Position, radius,
    colours and noise are random; pixels are quantised to multiples of 1/255
    so that the byte-level dataset format stores them exactly.
    """
    if size < 8:
        raise ValueError(f"size must be at least 8, got {size}")
    if not 1 <= classes <= len(SHAPE_NAMES):
        raise ValueError(f"classes must be in [1, {len(SHAPE_NAMES)}]")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    labels = rng.integers(0, classes, size=n)
    images = np.empty((n, channels, size, size))
    for i in range(n):
        r = rng.uniform(0.2, 0.36) * size
        cy = rng.uniform(r, size - 1 - r)
        cx = rng.uniform(r, size - 1 - r)
        bg = rng.uniform(0.05, 0.45, size=channels)
        fg = rng.uniform(0.55, 1.0, size=channels)
        noise = rng.normal(0.0, 0.08, size=(channels, size, size))
        m = _shape_mask(labels[i], yy, xx, cy, cx, r)
        img = np.where(m, fg[:, None, None], bg[:, None, None]) + noise
        images[i] = img
    images = np.floor(np.clip(images, 0.0, 1.0) * 255.0 + 0.5) / 255.0
    return Dataset(images, labels, split)


# --------------------------------------------------------------------------
# pixel removal


def channel_means(dataset: Dataset) -> np.ndarray:
    if len(dataset) == 0:
        raise ValueError("channel_means of an empty dataset")
    return dataset.images.mean(axis=(0, 2, 3))


def pixel_mask(saliency, fraction: float, descending: bool = False) -> np.ndarray:
    """Boolean H x W grid marking ``round(fraction * H * W)`` removed pixels.

    Ascending order removes the least salient pixels first, descending the
    most salient. Equal scores are taken in ascending flat-index order.
    """
    saliency = np.asarray(saliency, dtype=np.float64)
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    flat = saliency.ravel()
    k = round_half_up(fraction * flat.size)
    order = np.argsort(-flat if descending else flat, kind="stable")
    mask = np.zeros(flat.size, dtype=bool)
    mask[order[:k]] = True
    return mask.reshape(saliency.shape)


def pixel_masks(saliency_maps, fraction: float, descending: bool = False) -> np.ndarray:
    return np.stack([pixel_mask(s, fraction, descending) for s in saliency_maps])


def apply_pixel_mask(image, mask, fill) -> np.ndarray:
    """Copy of ``image`` (C x H x W) with masked pixels set to ``fill`` in every channel."""
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    fill = np.broadcast_to(np.asarray(fill, dtype=np.float64), (image.shape[0],))
    if mask.shape != image.shape[1:]:
        raise ValueError(f"mask shape {mask.shape} does not match image {image.shape}")
    out = image.copy()
    out[:, mask] = fill[:, None]
    return out


def apply_pixel_masks(images, masks, fill) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    masks = np.asarray(masks, dtype=bool)
    if masks.shape != (images.shape[0],) + images.shape[2:]:
        raise ValueError(f"masks {masks.shape} do not match images {images.shape}")
    fill = np.broadcast_to(np.asarray(fill, dtype=np.float64), (images.shape[1],))
    out = images.copy()
    sel = np.broadcast_to(masks[:, None], images.shape)
    out[sel] = np.broadcast_to(fill[None, :, None, None], images.shape)[sel]
    return out


def perturb_dataset(dataset: Dataset, masks, fill) -> Dataset:
    masks = np.asarray(masks, dtype=bool)
    if len(masks) != len(dataset):
        raise ValueError(f"{len(masks)} masks for {len(dataset)} images")
    return Dataset(apply_pixel_masks(dataset.images, masks, fill), dataset.labels.copy(),
                   dataset.split)


def write_perturbed_dataset(dataset: Dataset, masks, fill, path) -> Dataset:
    """Apply one mask per image and persist the result. Returns the perturbed
    dataset as it will read back (byte-quantised)."""
    perturbed = perturb_dataset(dataset, masks, fill)
    write_dataset(perturbed, path)
    return read_dataset(path, dataset.images.shape[1:], dataset.split)
