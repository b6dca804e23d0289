"""Procedurally generated IDX corpora.

Produces deterministic 28x28 grayscale datasets in the exact IDX file layout
the loader consumes. Each class is a smooth random prototype pattern; samples
are shifted, rescaled, noisy copies. The "fashion" variant blends prototype
pairs so classes are harder to separate. Meant for demos and for running the
full pipeline on machines that do not have the real digit/fashion corpora.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .rng import stream

CLASSES = 10
SIDE = 28

TRAIN_IMAGES = "train-images-idx3-ubyte.gz"
TRAIN_LABELS = "train-labels-idx1-ubyte.gz"
TEST_IMAGES = "t10k-images-idx3-ubyte.gz"
TEST_LABELS = "t10k-labels-idx1-ubyte.gz"


def _smooth(img: np.ndarray) -> np.ndarray:
    out = img.copy()
    for axis in (0, 1):
        out = (np.roll(out, 1, axis) + out + np.roll(out, -1, axis)) / 3.0
    return out


def _prototypes(name: str, seed: int) -> np.ndarray:
    rng = stream(seed, "synth-prototypes", name)
    low = rng.uniform(0.0, 1.0, size=(CLASSES, 7, 7))
    protos = np.kron(low, np.ones((4, 4)))
    for _ in range(2):
        protos = np.stack([_smooth(p) for p in protos])
    if name == "fashion":
        # blend non-adjacent class pairs so the task is materially harder;
        # real confusable garment classes are not neighbours in label order
        mixed = protos.copy()
        half = CLASSES // 2
        for c in range(half):
            mixed[c + half] = 0.25 * protos[c] + 0.75 * protos[c + half]
        protos = mixed
    lo = protos.min(axis=(1, 2), keepdims=True)
    hi = protos.max(axis=(1, 2), keepdims=True)
    return (protos - lo) / (hi - lo)


def _class_counts(name: str, seed: int, count: int) -> np.ndarray:
    """Mildly unbalanced per-class counts (largest-remainder allocation).

    Real corpora are not perfectly balanced; the imbalance also makes
    label-sorted partition slivers straddle class boundaries.
    """
    props = stream(seed, "synth-class-props", name).uniform(0.55, 1.6, CLASSES)
    ideal = props / props.sum() * count
    counts = np.floor(ideal).astype(np.int64)
    remainder = ideal - counts
    short = count - int(counts.sum())
    order = np.lexsort((np.arange(CLASSES), -remainder))
    counts[order[:short]] += 1
    return counts


def generate_split(name: str, count: int, seed: int, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Return (images uint8 (n, 28, 28), labels uint8 (n,)) for one split."""
    if count < CLASSES:
        raise ValueError(f"need at least {CLASSES} samples, got {count}")
    protos = _prototypes(name, seed)
    rng = stream(seed, "synth-samples", name, split)
    counts = _class_counts(name, seed, count)
    labels = rng.permutation(np.repeat(np.arange(CLASSES), counts)).astype(np.uint8)
    shifts = rng.integers(-3, 4, size=(count, 2))
    brightness = rng.uniform(0.75, 1.0, size=count)
    noise = rng.normal(0.0, 0.05, size=(count, SIDE, SIDE))
    images = np.empty((count, SIDE, SIDE), dtype=np.uint8)
    for i in range(count):
        img = np.roll(protos[labels[i]], tuple(shifts[i]), axis=(0, 1))
        img = np.clip(img * brightness[i] + noise[i], 0.0, 1.0)
        images[i] = np.round(img * 255.0).astype(np.uint8)
    return images, labels


def _write_gz(path: Path, payload: bytes) -> None:
    # fixed mtime keeps the generated files byte-reproducible
    with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
        fh.write(payload)


def _write_idx_images(path: Path, images: np.ndarray) -> None:
    _write_gz(path, struct.pack(">IIII", 2051, images.shape[0], SIDE, SIDE) + images.tobytes())


def _write_idx_labels(path: Path, labels: np.ndarray) -> None:
    _write_gz(path, struct.pack(">II", 2049, labels.shape[0]) + labels.astype(np.uint8).tobytes())


def write_corpus(
    root: Path | str,
    name: str = "mnist",
    train_count: int = 12000,
    test_count: int = 2000,
    seed: int = 1234,
) -> Path:
    """Write the four IDX files for one dataset under ``root/name`` and return that dir."""
    out = Path(root) / name
    out.mkdir(parents=True, exist_ok=True)
    train_images, train_labels = generate_split(name, train_count, seed, "train")
    test_images, test_labels = generate_split(name, test_count, seed, "test")
    _write_idx_images(out / TRAIN_IMAGES, train_images)
    _write_idx_labels(out / TRAIN_LABELS, train_labels)
    _write_idx_images(out / TEST_IMAGES, test_images)
    _write_idx_labels(out / TEST_LABELS, test_labels)
    return out
