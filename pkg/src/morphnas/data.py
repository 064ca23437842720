"""Dataset ingestion: IDX (MNIST-format) files and a synthetic texture generator."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .netgraph import Dataset

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class DataError(ValueError):
    pass


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path, expect_magic: int | None = None) -> np.ndarray:
    """Read an unsigned-byte IDX file (3-D images or 1-D labels)."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise DataError(f"{path}: too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise DataError(f"{path}: bad IDX magic 0x{magic:08x}")
    if expect_magic is not None and magic != expect_magic:
        raise DataError(f"{path}: IDX magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated IDX header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise DataError(f"{path}: IDX payload has {len(raw) - header} bytes, header declares {count}")
    return np.frombuffer(raw, np.uint8, count, header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write uint8 images (N, H, W) or labels (N,) in IDX format."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise DataError("IDX writer only supports uint8 arrays")
    if array.ndim == 3:
        magic = IDX_IMAGES
    elif array.ndim == 1:
        magic = IDX_LABELS
    else:
        raise DataError(f"IDX writer expects 1-D or 3-D arrays, got {array.ndim}-D")
    payload = struct.pack(">I", magic) + struct.pack(">" + "I" * array.ndim, *array.shape) + array.tobytes()
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(payload)


def load_idx_pair(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    images = read_idx(images_path, IDX_IMAGES)
    labels = read_idx(labels_path, IDX_LABELS)
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return images[..., None].astype(np.float32) / 255.0, labels.astype(np.int64)


# ---------------------------------------------------------------------------
# synthetic textures
# ---------------------------------------------------------------------------


def _texture(kind: int, freq: float, phase: float, angle: float, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    if kind == 0:  # stripes near horizontal
        t = yy * np.cos(angle) + xx * np.sin(angle)
        return np.sin(freq * t + phase)
    if kind == 1:  # stripes near vertical
        t = xx * np.cos(angle) - yy * np.sin(angle)
        return np.sin(freq * t + phase)
    if kind == 2:  # spots
        return np.sin(freq * yy + phase) * np.sin(freq * xx + 0.7 * phase)
    # smooth gradient
    return (yy * np.cos(angle + phase) + xx * np.sin(angle + phase)) / max(yy.max(), 1.0) * 2 - 1


def synthetic_dataset(
    classes: int = 4,
    image_size: int = 16,
    samples: int = 1000,
    seed: int = 0,
    channels: int = 3,
    noise: float = 0.8,
    distractor: float = 0.5,
) -> tuple[np.ndarray, np.ndarray]:
    """Class-dependent textures (stripes, spots, gradients) with random
    frequency, phase, orientation jitter, colour, a blended distractor
    texture from another class, and additive Gaussian noise.

    Classes cycle through the four texture families; classes beyond four use
    a higher base frequency.  Labels are balanced to within one sample.
    """
    if classes < 2 or image_size < 2 or samples < classes:
        raise DataError("need at least 2 classes, 2x2 images and one sample per class")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    labels = np.arange(samples) % classes
    rng.shuffle(labels)
    images = np.empty((samples, image_size, image_size, channels), np.float32)
    for i, c in enumerate(labels):
        kind, tier = c % 4, c // 4
        base = 2 * np.pi / image_size * (2 + 1.5 * tier)
        pat = _texture(kind, base * rng.uniform(0.8, 1.6), rng.uniform(0, 2 * np.pi), rng.uniform(-0.35, 0.35), yy, xx)
        other = int(rng.integers(classes - 1))
        other += other >= c
        dis = _texture(
            other % 4, base * rng.uniform(0.8, 1.6), rng.uniform(0, 2 * np.pi), rng.uniform(-0.35, 0.35), yy, xx
        )
        mix = pat + rng.uniform(0, distractor) * dis
        colour = rng.uniform(0.3, 1.0, channels) * rng.choice([-1, 1], channels)
        img = mix[..., None] * colour + rng.uniform(-0.5, 0.5, channels)
        img += rng.normal(0, noise, img.shape)
        images[i] = img
    return images, labels.astype(np.int64)


# ---------------------------------------------------------------------------
# splitting, normalisation, augmentation
# ---------------------------------------------------------------------------


def stratified_split(labels: np.ndarray, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-class random split; each class contributes round(fraction * n_c) validation samples."""
    if not 0 < fraction < 1:
        raise DataError(f"validation fraction must lie in (0, 1), got {fraction}")
    train, val = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        n_val = int(round(fraction * len(idx)))
        if n_val < 1 or n_val >= len(idx):
            raise DataError(f"class {c} has {len(idx)} samples, too few for a {fraction} validation split")
        idx = rng.permutation(idx)
        val.append(idx[:n_val])
        train.append(idx[n_val:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = images.astype(np.float64)
    mean = x.mean(axis=(0, 1, 2))
    std = x.std(axis=(0, 1, 2))
    return mean, np.where(std > 0, std, 1.0)


def normalize(images: np.ndarray, mean: np.ndarray, std: np.ndarray, dtype=np.float32) -> np.ndarray:
    return ((images.astype(np.float64) - mean) / std).astype(dtype)


@dataclass
class Augmenter:
    """Zero-pad by ``pad`` then random crop, plus optional horizontal flip."""

    pad: int = 4
    flip: bool = True

    def __call__(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        n, h, w, _ = x.shape
        out = x
        if self.pad > 0:
            xp = np.pad(x, ((0, 0), (self.pad, self.pad), (self.pad, self.pad), (0, 0)))
            dy = rng.integers(0, 2 * self.pad + 1, n)
            dx = rng.integers(0, 2 * self.pad + 1, n)
            out = np.empty_like(x)
            for i in range(n):
                out[i] = xp[i, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
        if self.flip:
            mask = rng.random(n) < 0.5
            if mask.any():
                out = out.copy() if out is x else out
                out[mask] = out[mask, :, ::-1]
        return out


@dataclass
class DatasetSpec:
    source: str = "synthetic"
    images: str | None = None
    labels: str | None = None
    classes: int = 4
    image_size: int = 16
    samples: int = 2500
    generator_seed: int = 0
    channels: int = 3
    noise: float = 0.8
    distractor: float = 0.5
    validation_fraction: float = 0.2
    split_seed: int = 0
    augment_pad: int = 4
    augment_flip: bool = True

    def augmenter(self) -> Augmenter | None:
        if self.augment_pad <= 0 and not self.augment_flip:
            return None
        return Augmenter(self.augment_pad, self.augment_flip)


@dataclass
class LoadedData:
    train: Dataset
    val: Dataset
    mean: np.ndarray = field(repr=False)
    std: np.ndarray = field(repr=False)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.train.images.shape[1:])

    @property
    def classes(self) -> int:
        return int(max(self.train.labels.max(), self.val.labels.max())) + 1


def load_dataset(spec: DatasetSpec, dtype=np.float32) -> LoadedData:
    """Load, split (stratified), and normalise with training-split channel statistics."""
    if spec.source == "idx":
        if not spec.images or not spec.labels:
            raise DataError("idx source needs both images and labels paths")
        images, labels = load_idx_pair(spec.images, spec.labels)
    elif spec.source == "synthetic":
        images, labels = synthetic_dataset(
            spec.classes, spec.image_size, spec.samples, spec.generator_seed, spec.channels,
            spec.noise, spec.distractor,
        )
    else:
        raise DataError(f"unknown dataset source {spec.source!r}")
    tr, va = stratified_split(labels, spec.validation_fraction, np.random.default_rng(spec.split_seed))
    mean, std = channel_stats(images[tr])
    return LoadedData(
        Dataset(normalize(images[tr], mean, std, dtype), labels[tr]),
        Dataset(normalize(images[va], mean, std, dtype), labels[va]),
        mean,
        std,
    )
