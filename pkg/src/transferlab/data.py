"""CIFAR-10 ingestion, batching, and stratified subsampling.

Images live in the raw pixel domain [0, 1] everywhere in this package. Any
mean/std normalization a model wants is part of the model itself, so that a
perturbation budget in pixel units means the same thing for every network.

The loader reads the official CIFAR-10 *binary* layout: each record is one
label byte followed by 3072 pixel bytes (the red 32x32 plane, then green,
then blue, row-major). Train data spans ``data_batch_1.bin`` ..
``data_batch_5.bin``; the test split is ``test_batch.bin``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import DataIntegrityError, IngestionError
from .records import file_digest

NUM_CLASSES = 10
IMAGE_SHAPE = (3, 32, 32)
RECORD_BYTES = 1 + 3072
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"
OFFICIAL_TRAIN_SIZE = 50_000
OFFICIAL_TEST_SIZE = 10_000

CLASS_NAMES = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
)


@dataclass(frozen=True)
class ImageBatch:
    """Rank-4 float array [N, C, H, W] with every element in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ValueError(f"image batch must be rank 4, got shape {self.data.shape}")
        if self.data.shape[0] < 1:
            raise ValueError("image batch must contain at least one image")
        if not np.issubdtype(self.data.dtype, np.floating):
            raise ValueError(f"image batch must be floating point, got {self.data.dtype}")
        lo = float(self.data.min())
        hi = float(self.data.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"pixel values must lie in [0, 1], got range [{lo}, {hi}]")

    def __len__(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class LabelBatch:
    """Integer class labels [N], each in [0, num_classes)."""

    labels: np.ndarray
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        if self.labels.ndim != 1:
            raise ValueError(f"labels must be rank 1, got shape {self.labels.shape}")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise ValueError(f"labels must be integers, got {self.labels.dtype}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataIntegrityError(
                f"labels outside [0, {self.num_classes}): "
                f"range [{int(self.labels.min())}, {int(self.labels.max())}]"
            )

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class DatasetSplit:
    images: ImageBatch
    labels: LabelBatch
    split_name: str
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"image/label length mismatch: {len(self.images)} vs {len(self.labels)}"
            )

    def __len__(self) -> int:
        return len(self.images)


def _data_dir(root: str | Path) -> Path:
    root = Path(root)
    for candidate in (root, root / "cifar-10-batches-bin"):
        if (candidate / TEST_FILE).exists() or (candidate / TRAIN_FILES[0]).exists():
            return candidate
    return root


def _read_binary_batch(path: Path) -> tuple[np.ndarray, np.ndarray]:
    """Parse one binary batch file into (uint8 images [N,3,32,32], labels [N])."""
    if not path.exists():
        raise IngestionError(f"missing CIFAR-10 batch file: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % RECORD_BYTES != 0:
        raise IngestionError(
            f"corrupt CIFAR-10 batch file {path}: {raw.size} bytes is not a "
            f"multiple of the {RECORD_BYTES}-byte record size"
        )
    records = raw.reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max(initial=0) >= NUM_CLASSES:
        raise DataIntegrityError(
            f"label out of range in {path}: max label {int(labels.max())}"
        )
    images = records[:, 1:].reshape(-1, *IMAGE_SHAPE)
    return images, labels


def _to_unit_interval(images_u8: np.ndarray) -> np.ndarray:
    # byte 0 -> 0.0 and byte 255 -> 1.0 exactly
    return images_u8.astype(np.float32) / np.float32(255.0)


def load_cifar10(
    root_path: str | Path,
    require_official_sizes: bool = True,
) -> tuple[DatasetSplit, DatasetSplit]:
    """Load the binary CIFAR-10 batches under ``root_path``.

    Returns (train, test) splits with pixel values in [0, 1] and example
    order exactly matching file order. ``require_official_sizes`` enforces
    the 50,000/10,000 split sizes of the official archive; disable it for
    reduced or synthetic datasets written in the same binary layout.
    """
    directory = _data_dir(root_path)

    train_images = []
    train_labels = []
    provenance: dict = {}
    for name in TRAIN_FILES:
        path = directory / name
        images, labels = _read_binary_batch(path)
        train_images.append(images)
        train_labels.append(labels)
        provenance[name] = file_digest(path)
    test_images_u8, test_labels_arr = _read_binary_batch(directory / TEST_FILE)
    provenance[TEST_FILE] = file_digest(directory / TEST_FILE)

    train_data = _to_unit_interval(np.concatenate(train_images))
    train_lab = np.concatenate(train_labels)
    test_data = _to_unit_interval(test_images_u8)

    if require_official_sizes:
        if len(train_lab) != OFFICIAL_TRAIN_SIZE:
            raise IngestionError(
                f"expected {OFFICIAL_TRAIN_SIZE} training examples, found {len(train_lab)}"
            )
        if len(test_labels_arr) != OFFICIAL_TEST_SIZE:
            raise IngestionError(
                f"expected {OFFICIAL_TEST_SIZE} test examples, found {len(test_labels_arr)}"
            )

    train = DatasetSplit(
        images=ImageBatch(train_data),
        labels=LabelBatch(train_lab),
        split_name="train",
        provenance=dict(provenance, source=str(directory)),
    )
    test = DatasetSplit(
        images=ImageBatch(test_data),
        labels=LabelBatch(test_labels_arr),
        split_name="test",
        provenance=dict(provenance, source=str(directory)),
    )
    return train, test


def batch_index_plan(
    n: int, batch_size: int, shuffle_seed: Optional[int] = None
) -> list[np.ndarray]:
    """Partition indices 0..n-1 into consecutive batches, optionally after a
    seeded shuffle. Every index appears exactly once; the last batch may be
    short."""
    if batch_size <= 0:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    order = np.arange(n)
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def make_batches(
    split: DatasetSplit,
    batch_size: int,
    shuffle_seed: Optional[int] = None,
) -> Iterator[tuple[ImageBatch, LabelBatch]]:
    """Yield one epoch of (ImageBatch, LabelBatch) pairs.

    Identical seeds produce identical batch sequences; ``shuffle_seed=None``
    preserves file order. The iterator owns its cursor and must not be
    shared across concurrent consumers.
    """
    if batch_size > len(split):
        raise ValueError(
            f"batch_size {batch_size} exceeds split size {len(split)}"
        )
    num_classes = split.labels.num_classes
    for idx in batch_index_plan(len(split), batch_size, shuffle_seed):
        yield (
            ImageBatch(split.images.data[idx]),
            LabelBatch(split.labels.labels[idx], num_classes=num_classes),
        )


def subsample(split: DatasetSplit, fraction: float, seed: int) -> DatasetSplit:
    """Per-class stratified subsample of ``fraction`` of the split.

    ``fraction=1`` returns the split unchanged. The per-class draw count is
    round(fraction * class_count), so class balance is preserved exactly
    whenever that product is integral. Deterministic under ``seed``.
    """
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return split

    rng = np.random.default_rng(seed)
    labels = split.labels.labels
    chosen: list[np.ndarray] = []
    for cls in range(split.labels.num_classes):
        cls_idx = np.flatnonzero(labels == cls)
        take = int(np.floor(fraction * len(cls_idx) + 0.5))
        if take > 0:
            chosen.append(rng.choice(cls_idx, size=take, replace=False))
    idx = np.sort(np.concatenate(chosen)) if chosen else np.array([], dtype=np.int64)
    return DatasetSplit(
        images=ImageBatch(split.images.data[idx]),
        labels=LabelBatch(labels[idx], num_classes=split.labels.num_classes),
        split_name=split.split_name,
        provenance=dict(split.provenance, subsample={"fraction": fraction, "seed": seed}),
    )


def write_cifar_batches(
    root: str | Path,
    train_images_u8: np.ndarray,
    train_labels: np.ndarray,
    test_images_u8: np.ndarray,
    test_labels: np.ndarray,
) -> Path:
    """Write arrays out in the official binary batch layout.

    Training examples are distributed over the five ``data_batch_*.bin``
    files in order. Mainly used to materialize synthetic datasets that the
    rest of the pipeline can consume exactly like the real archive.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)

    def _write(path: Path, images: np.ndarray, labels: np.ndarray):
        if images.dtype != np.uint8:
            raise ValueError(f"expected uint8 images, got {images.dtype}")
        n = len(labels)
        recs = np.empty((n, RECORD_BYTES), dtype=np.uint8)
        recs[:, 0] = labels.astype(np.uint8)
        recs[:, 1:] = images.reshape(n, -1)
        recs.tofile(path)

    splits = np.array_split(np.arange(len(train_labels)), len(TRAIN_FILES))
    for name, part in zip(TRAIN_FILES, splits):
        _write(root / name, train_images_u8[part], train_labels[part])
    _write(root / TEST_FILE, test_images_u8, test_labels)
    return root


def synthesize_class_patterns(
    n_train: int,
    n_test: int,
    seed: int = 0,
    noise: float = 0.10,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Generate a learnable 10-class stand-in dataset at CIFAR-10 geometry.

    Each class is a distinct color-ramp/stripe template plus pixel noise, so
    small networks reach high accuracy quickly. Returned as uint8 arrays
    ready for :func:`write_cifar_batches`. This is a pipeline exerciser for
    offline environments, not a substitute for the real dataset.
    """
    rng = np.random.default_rng(seed)
    c, h, w = IMAGE_SHAPE
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")

    templates = np.zeros((NUM_CLASSES, c, h, w), dtype=np.float64)
    for cls in range(NUM_CLASSES):
        phase = cls / NUM_CLASSES
        freq = 1 + cls % 5
        stripes = 0.5 + 0.5 * np.sin(2 * np.pi * (freq * xx + phase))
        ramp = (yy + phase) % 1.0
        base = np.array([
            0.5 + 0.5 * np.sin(2 * np.pi * phase),
            0.5 + 0.5 * np.sin(2 * np.pi * (phase + 1 / 3)),
            0.5 + 0.5 * np.sin(2 * np.pi * (phase + 2 / 3)),
        ])
        for ch in range(c):
            templates[cls, ch] = 0.5 * base[ch] + 0.3 * stripes + 0.2 * ramp

    def _draw(n: int) -> tuple[np.ndarray, np.ndarray]:
        labels = np.arange(n) % NUM_CLASSES
        rng.shuffle(labels)
        images = templates[labels] + rng.normal(0.0, noise, size=(n, c, h, w))
        images = np.clip(images, 0.0, 1.0)
        return np.round(images * 255).astype(np.uint8), labels.astype(np.int64)

    train_images, train_labels = _draw(n_train)
    test_images, test_labels = _draw(n_test)
    return train_images, train_labels, test_images, test_labels


def ensure_synthetic_dataset(
    root: str | Path, n_train: int, n_test: int, seed: int = 0
) -> Path:
    """Materialize the synthetic dataset under ``root`` if not already there."""
    root = Path(root)
    if (root / TEST_FILE).exists():
        return root
    arrays = synthesize_class_patterns(n_train, n_test, seed=seed)
    return write_cifar_batches(root, *arrays)
