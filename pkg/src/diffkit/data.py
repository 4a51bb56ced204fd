"""Dataset ingestion, normalisation, augmentation and shuffled mini-batching."""

from __future__ import annotations

import json
import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataFormatError
from .rng import Rng
from .tensor import Tensor

CIFAR_RECORD = 3073
CIFAR_SIDE = 32
CIFAR_CLASSES = 10
IMAGE_SUFFIXES = (".png", ".ppm")
NORMALIZATIONS = ("unit_interval_symmetric", "dataset_standardize")


@dataclass
class Dataset:
    images: np.ndarray  # uint8 [N, 3, H, W]
    labels: np.ndarray  # int64 [N]
    class_count: int
    class_names: Optional[list[str]] = None

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataFormatError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Batch:
    images: Tensor
    labels: Optional[np.ndarray] = None


@dataclass
class ChannelStats:
    mean: list[float]
    std: list[float]

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({"mean": self.mean, "std": self.std}, indent=2))

    @classmethod
    def load(cls, path) -> "ChannelStats":
        raw = json.loads(Path(path).read_text())
        return cls([float(v) for v in raw["mean"]], [float(v) for v in raw["std"]])


@dataclass
class LoaderConfig:
    batch_size: int = 128
    shuffle: bool = True
    seed: int = 42
    num_workers: int = 4
    flip_prob: float = 0.5
    normalization: str = "unit_interval_symmetric"

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        if self.num_workers < 1:
            raise ConfigError("num_workers must be >= 1")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"normalization must be one of {list(NORMALIZATIONS)}")


# -- ingestion -------------------------------------------------------------------

def parse_cifar10_binary(buf: bytes) -> Dataset:
    """Split a CIFAR-10 binary batch: 1 label byte then R, G, B planes of 1024 bytes."""
    if len(buf) % CIFAR_RECORD:
        raise DataFormatError(
            f"CIFAR-10 buffer of {len(buf)} bytes is not a multiple of {CIFAR_RECORD} "
            f"({len(buf) % CIFAR_RECORD} trailing bytes)"
        )
    records = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.nonzero(labels >= CIFAR_CLASSES)[0]
    if bad.size:
        raise DataFormatError(f"record {bad[0]} has label byte {labels[bad[0]]} > 9")
    images = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).copy()
    return Dataset(images, labels, CIFAR_CLASSES)


def load_cifar10(paths: Sequence[os.PathLike]) -> Dataset:
    parts = [parse_cifar10_binary(Path(p).read_bytes()) for p in paths]
    return Dataset(
        np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]), CIFAR_CLASSES
    )


def read_image(path: os.PathLike, size: Optional[int] = None) -> np.ndarray:
    """Decode a PNG or PPM to uint8 [3, H, W], optionally bilinear-resized to size x size."""
    from PIL import Image

    with Image.open(path) as img:
        img = img.convert("RGB")
        if size is not None and img.size != (size, size):
            img = img.resize((size, size), Image.BILINEAR)
        return np.asarray(img, dtype=np.uint8).transpose(2, 0, 1).copy()


def load_image_folder(root: os.PathLike, size: Optional[int] = None) -> Dataset:
    """``root/<class>/<file>`` layout; class ids follow sorted directory names.

    A flat directory of images (no class subdirectories) loads as one class.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataFormatError(f"image folder {root} does not exist")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    groups = [(d.name, d) for d in class_dirs] if class_dirs else [(root.name, root)]
    images, labels = [], []
    for idx, (_, folder) in enumerate(groups):
        for f in sorted(folder.iterdir()):
            if f.suffix.lower() in IMAGE_SUFFIXES:
                images.append(read_image(f, size))
                labels.append(idx)
    if not images:
        raise DataFormatError(f"no .png/.ppm images under {root}")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DataFormatError(f"images under {root} have mixed sizes {sorted(shapes)}; pass a resize")
    return Dataset(np.stack(images), np.asarray(labels, dtype=np.int64), len(groups), [g[0] for g in groups])


# -- normalisation ------------------------------------------------------------

def compute_stats(dataset: Dataset) -> ChannelStats:
    px = dataset.images.astype(np.float64)
    return ChannelStats(px.mean(axis=(0, 2, 3)).tolist(), px.std(axis=(0, 2, 3)).tolist())


def _stat_arrays(stats: ChannelStats, channels: int):
    mean = np.asarray(stats.mean, dtype=np.float64).reshape(1, channels, 1, 1)
    std = np.asarray(stats.std, dtype=np.float64).reshape(1, channels, 1, 1)
    return mean, std


def normalize(pixels: np.ndarray, mode: str = "unit_interval_symmetric",
              stats: Optional[ChannelStats] = None) -> Tensor:
    """Map bytes [N, C, H, W] to model inputs."""
    px = np.asarray(pixels, dtype=np.float64)
    if mode == "unit_interval_symmetric":
        return Tensor(px / 127.5 - 1.0)
    if mode == "dataset_standardize":
        if stats is None:
            raise ConfigError("dataset_standardize needs precomputed channel stats")
        mean, std = _stat_arrays(stats, px.shape[1])
        return Tensor((px - mean) / std)
    raise ConfigError(f"normalization must be one of {list(NORMALIZATIONS)}, got {mode!r}")


def denormalize(x, mode: str = "unit_interval_symmetric", stats: Optional[ChannelStats] = None) -> np.ndarray:
    """Inverse of :func:`normalize`, as float pixels in [0, 1] (clamped)."""
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if mode == "unit_interval_symmetric":
        out = (arr + 1.0) / 2.0
    elif mode == "dataset_standardize":
        mean, std = _stat_arrays(stats, arr.shape[1])
        out = (arr * std + mean) / 255.0
    else:
        raise ConfigError(f"normalization must be one of {list(NORMALIZATIONS)}, got {mode!r}")
    return np.clip(out, 0.0, 1.0)


def to_bytes(unit: np.ndarray) -> np.ndarray:
    """Float pixels in [0, 1] to rounded uint8."""
    return np.clip(np.rint(np.asarray(unit) * 255.0), 0, 255).astype(np.uint8)


def augment(image: np.ndarray, rng: Rng, flip_prob: float) -> np.ndarray:
    """Mirror along the width axis with probability ``flip_prob``."""
    if flip_prob > 0 and rng.uniform(()) < flip_prob:
        return image[..., ::-1].copy()
    return image


def hflip(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1].copy()


# -- batching -----------------------------------------------------------------

def epoch_order(n: int, seed: int, epoch: int, shuffle: bool) -> np.ndarray:
    return Rng(seed, 0xDA7A, epoch).permutation(n) if shuffle else np.arange(n)


def _load_batch(dataset: Dataset, idx: np.ndarray, cfg: LoaderConfig, epoch: int,
                stats: Optional[ChannelStats]) -> Batch:
    # per-item streams make the output independent of worker scheduling
    imgs = np.stack([
        augment(dataset.images[i], Rng(cfg.seed, 0xF11, epoch, int(i)), cfg.flip_prob) for i in idx
    ])
    return Batch(normalize(imgs, cfg.normalization, stats), dataset.labels[idx].copy())


def batches(dataset: Dataset, cfg: LoaderConfig, epoch: int,
            stats: Optional[ChannelStats] = None) -> Iterator[Batch]:
    """Shuffled, augmented, normalised batches; the final partial batch is dropped.

    With ``num_workers > 1`` batches are assembled by a thread pool with a
    bounded number in flight and yielded in index order.
    """
    cfg.validate()
    n = len(dataset)
    if n == 0:
        raise ConfigError("dataset is empty")
    if cfg.batch_size > n:
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds dataset size {n}")
    order = epoch_order(n, cfg.seed, epoch, cfg.shuffle)
    chunks = [order[i : i + cfg.batch_size] for i in range(0, n - cfg.batch_size + 1, cfg.batch_size)]
    if cfg.num_workers == 1:
        for idx in chunks:
            yield _load_batch(dataset, idx, cfg, epoch, stats)
        return
    with ThreadPoolExecutor(max_workers=cfg.num_workers) as pool:
        pending: deque = deque()
        it = iter(chunks)
        for idx in it:
            pending.append(pool.submit(_load_batch, dataset, idx, cfg, epoch, stats))
            if len(pending) >= 2 * cfg.num_workers:
                break
        while pending:
            yield pending.popleft().result()
            nxt = next(it, None)
            if nxt is not None:
                pending.append(pool.submit(_load_batch, dataset, nxt, cfg, epoch, stats))


def array_batches(images: np.ndarray, labels: Optional[np.ndarray], batch_size: int, seed: int,
                  epoch: int, shuffle: bool = True) -> Iterator[Batch]:
    """Batches over already-normalised float arrays (synthetic data, cached latents)."""
    n = len(images)
    if batch_size > n:
        raise ConfigError(f"batch_size {batch_size} exceeds dataset size {n}")
    order = epoch_order(n, seed, epoch, shuffle)
    for i in range(0, n - batch_size + 1, batch_size):
        idx = order[i : i + batch_size]
        yield Batch(Tensor(images[idx]), None if labels is None else np.asarray(labels)[idx])


def two_mode_images(n: int, size: int = 8, channels: int = 1, level: float = 0.8) -> np.ndarray:
    """Half solid +level, half solid -level images (already normalised)."""
    out = np.empty((n, channels, size, size))
    out[: n // 2] = level
    out[n // 2 :] = -level
    return out
