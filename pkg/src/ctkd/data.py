"""Datasets, augmentation and batching.

Supports the CIFAR binary record layout (CIFAR-10 style: one label byte then
3072 channel-planar pixel bytes; CIFAR-100 style: coarse and fine label
bytes) and a synthetic class-conditional blob task for desk-scale runs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, CorruptionError, DataError, FormatError

IMAGE_SHAPE = (3, 32, 32)
PIXELS = 3 * 32 * 32
RECORDS_PER_FILE = 10000

# stream ids mixed into SeedSequence entropy; keep stable for reproducibility
STREAM_INIT_STUDENT = 1
STREAM_INIT_SCRATCH = 2
STREAM_INIT_EXPERT = 3
STREAM_AUGMENT = 4
STREAM_BATCH_ORDER = 5
STREAM_SYNTH_TRAIN = 6
STREAM_SYNTH_TEST = 7
STREAM_SYNTH_TEMPLATE = 8
STREAM_SUBSET = 9
STREAM_ADAPTER = 10


def stream(seed: int, stream_id: int, *extra: int) -> np.random.Generator:
    """Independent generator for (run seed, purpose, extra keys)."""
    return np.random.default_rng(np.random.SeedSequence([seed, stream_id, *extra]))


def stream_seed(seed: int, stream_id: int) -> int:
    return int(np.random.SeedSequence([seed, stream_id]).generate_state(1)[0])


@dataclass
class Dataset:
    images: np.ndarray  # [N,3,H,W] normalized
    labels: np.ndarray  # [N] int64
    num_classes: int
    split: str
    mean: np.ndarray  # per-channel, of the [0,1]-scaled train pixels
    std: np.ndarray

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def denormalize(self) -> np.ndarray:
        """Images back in [0,1] pixel scale."""
        return self.images * self.std.reshape(1, -1, 1, 1) + self.mean.reshape(1, -1, 1, 1)

    def subset(self, indices) -> Dataset:
        indices = np.asarray(indices)
        return replace(self, images=self.images[indices], labels=self.labels[indices])


def normalization_stats(pixels01: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = pixels01.mean(axis=(0, 2, 3), dtype=np.float64)
    std = pixels01.std(axis=(0, 2, 3), dtype=np.float64)
    return mean, np.where(std > 0, std, 1.0)


def normalize(pixels01: np.ndarray, mean: np.ndarray, std: np.ndarray, dtype=np.float32) -> np.ndarray:
    return ((pixels01 - mean.reshape(1, -1, 1, 1)) / std.reshape(1, -1, 1, 1)).astype(dtype)


# -- CIFAR binary codec ---------------------------------------------------

def write_cifar_records(path, pixels: np.ndarray, labels: np.ndarray, coarse: np.ndarray | None = None) -> None:
    """Encode uint8 [N,3,32,32] images; ``coarse`` adds the CIFAR-100 leading label byte."""
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(labels), PIXELS)
    cols = [np.asarray(labels, dtype=np.uint8).reshape(-1, 1), pixels]
    if coarse is not None:
        cols.insert(0, np.asarray(coarse, dtype=np.uint8).reshape(-1, 1))
    Path(path).write_bytes(np.hstack(cols).tobytes())


def read_cifar_records(
    path, num_classes: int = 10, label_bytes: int = 1, records: int | None = RECORDS_PER_FILE
) -> tuple[np.ndarray, np.ndarray]:
    """Decode one binary file to (uint8 [N,3,32,32], int64 labels); fine label is the last label byte."""
    raw = Path(path).read_bytes()
    rec = label_bytes + PIXELS
    if records is not None:
        expected = records * rec
        if len(raw) != expected:
            raise FormatError(f"{path}: expected {expected} bytes ({records} records), got {len(raw)}")
    elif len(raw) == 0 or len(raw) % rec:
        raise FormatError(f"{path}: size {len(raw)} is not a positive multiple of record size {rec}")
    table = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = table[:, label_bytes - 1].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        raise CorruptionError(f"{path}: record {bad[0]} has label byte {labels[bad[0]]} >= {num_classes}")
    return table[:, label_bytes:].reshape(-1, *IMAGE_SHAPE), labels


LAYOUTS = {
    # name: (train files, test files, classes, label bytes)
    "cifar10": ([f"data_batch_{i}.bin" for i in range(1, 6)], ["test_batch.bin"], 10, 1),
    "cifar100": (["train.bin"], ["test.bin"], 100, 2),
    "svhn": (None, None, 10, 1),  # pre-converted to cifar10-style records, any count
}


def _find(root: Path, name: str) -> Path:
    for cand in (root / name, root / "cifar-10-batches-bin" / name, root / "cifar-100-binary" / name):
        if cand.exists():
            return cand
    raise FormatError(f"missing dataset file {name} under {root}")


def _load_split(root: Path, layout: str, split: str, records: int | None):
    train_files, test_files, classes, lb = LAYOUTS[layout]
    if train_files is None:
        files = [_find(root, f"{split}.bin")]
        records = None
    else:
        files = [_find(root, f) for f in (train_files if split == "train" else test_files)]
        if layout == "cifar100":
            records = 50000 if split == "train" else 10000
    parts = [read_cifar_records(f, classes, lb, records) for f in files]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]), classes


def load_cifar_binary(
    path,
    split: str,
    layout: str = "cifar10",
    stats: tuple[np.ndarray, np.ndarray] | None = None,
    records_per_file: int | None = RECORDS_PER_FILE,
) -> Dataset:
    """Load a split, scale pixels to [0,1] and standardize with train-split channel stats.

    Any malformed file aborts the whole load.
    """
    if split not in ("train", "test"):
        raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
    if layout not in LAYOUTS:
        raise ConfigError(f"unknown dataset layout {layout!r}; valid: {sorted(LAYOUTS)}")
    root = Path(path)
    pixels, labels, classes = _load_split(root, layout, split, records_per_file)
    x01 = pixels.astype(np.float32) / 255.0
    if stats is None:
        if split == "train":
            stats = normalization_stats(x01)
        else:
            train_pixels, _, _ = _load_split(root, layout, "train", records_per_file)
            stats = normalization_stats(train_pixels.astype(np.float32) / 255.0)
    mean, std = stats
    return Dataset(normalize(x01, mean, std), labels, classes, split, mean, std)


# -- synthetic task -------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 2
    train_samples: int = 256
    test_samples: int = 256
    image_size: int = 32
    separation: float = 3.0
    noise: float = 1.0
    seed: int = 0


def _templates(spec: SyntheticSpec) -> np.ndarray:
    rng = stream(spec.seed, STREAM_SYNTH_TEMPLATE)
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s] / (s - 1)
    out = np.empty((spec.num_classes, 3, s, s))
    for k in range(spec.num_classes):
        cy, cx = rng.uniform(0.2, 0.8, size=2)
        width = rng.uniform(0.12, 0.25)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
        colour = rng.normal(size=3)
        colour /= np.linalg.norm(colour)
        out[k] = colour.reshape(3, 1, 1) * blob
    return out


def _synthetic_raw(spec: SyntheticSpec, split: str) -> tuple[np.ndarray, np.ndarray]:
    n = spec.train_samples if split == "train" else spec.test_samples
    rng = stream(spec.seed, STREAM_SYNTH_TRAIN if split == "train" else STREAM_SYNTH_TEST)
    labels = np.arange(n, dtype=np.int64) % spec.num_classes
    rng.shuffle(labels)
    s = spec.image_size
    x = spec.separation * _templates(spec)[labels] + spec.noise * rng.normal(size=(n, 3, s, s))
    return x, labels


def synthetic_dataset(spec: SyntheticSpec, split: str = "train") -> Dataset:
    """Gaussian-blob images: separation * class template + isotropic noise.

    Labels cycle through the classes so every split is balanced. Both splits
    share templates and train-split normalization but draw separate noise.
    """
    if spec.num_classes < 2:
        raise ConfigError(f"synthetic task needs at least 2 classes, got {spec.num_classes}")
    x, labels = _synthetic_raw(spec, split)
    ref = x if split == "train" else _synthetic_raw(spec, "train")[0]
    mean, std = normalization_stats(ref)
    return Dataset(normalize(x, mean, std), labels, spec.num_classes, split, mean, std)


# -- augmentation and batching ---------------------------------------------

@dataclass(frozen=True)
class AugmentPolicy:
    pad: int = 4
    crop: tuple[int, int] = (32, 32)
    hflip_prob: float = 0.5
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ConfigError(f"hflip_prob must be in [0,1], got {self.hflip_prob}")
        if self.pad < 0:
            raise ConfigError(f"pad must be non-negative, got {self.pad}")


def augment(batch: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Reflect-pad, random crop back to size, random horizontal flip; per image."""
    if not policy.enabled:
        return batch
    n, c, h, w = batch.shape
    ch, cw = policy.crop
    if ch > h + 2 * policy.pad or cw > w + 2 * policy.pad:
        raise ConfigError(f"crop {policy.crop} larger than padded size {(h + 2 * policy.pad, w + 2 * policy.pad)}")
    pad = policy.pad
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect") if pad else batch
    oy = rng.integers(0, padded.shape[2] - ch + 1, size=n)
    ox = rng.integers(0, padded.shape[3] - cw + 1, size=n)
    flip = rng.random(n) < policy.hflip_prob
    out = np.empty((n, c, ch, cw), dtype=batch.dtype)
    for i in range(n):
        img = padded[i, :, oy[i] : oy[i] + ch, ox[i] : ox[i] + cw]
        out[i] = img[:, :, ::-1] if flip[i] else img
    return out


def batch_iter(n: int, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[np.ndarray]:
    """Index batches over range(n); a permutation when ``rng`` is given, else in order.

    The last batch may be short.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int, stage: int = 2) -> Iterator[np.ndarray]:
    """Shuffled training order for one epoch, drawn only from the batch-order stream."""
    return batch_iter(n, batch_size, stream(seed, STREAM_BATCH_ORDER, stage, epoch))


def augment_rng(seed: int, epoch: int, stage: int = 2) -> np.random.Generator:
    return stream(seed, STREAM_AUGMENT, stage, epoch)
