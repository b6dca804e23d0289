"""IDX dataset loading and per-node partitioning.

Images are flattened to float32 vectors scaled to [0, 1]; labels are int64 in
[0, 9]. Partitioning supports an IID shuffle split and a label-skewed split
that deals label-sorted slivers to nodes. Splits are exact: the multiset union
of the shards equals the source set.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import stream

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

IID = "iid"
NON_IID = "noniid"


class IdxFormatError(ValueError):
    """Malformed IDX file: bad magic, truncation, or count mismatch."""


@dataclass(frozen=True)
class DatasetShard:
    """A slice of a dataset: (n, d) images in [0, 1] and (n,) integer labels."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        if self.images.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("images must be (n, d), labels must be (n,)")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )

    def __len__(self) -> int:
        return int(self.images.shape[0])


@dataclass(frozen=True)
class PartitionPlan:
    """How to split a dataset across nodes."""

    mode: str
    num_nodes: int
    seed: int
    shards_per_node: int = 2

    def __post_init__(self) -> None:
        if self.mode not in (IID, NON_IID):
            raise ValueError(f"mode must be {IID!r} or {NON_IID!r}, got {self.mode!r}")
        if self.num_nodes < 1:
            raise ValueError("num_nodes must be >= 1")
        if self.shards_per_node < 1:
            raise ValueError("shards_per_node must be >= 1")


def _read_bytes(path: Path | str) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def load_idx(images_path: Path | str, labels_path: Path | str) -> DatasetShard:
    """Parse an IDX image/label file pair (raw or gzipped) into a shard."""
    img_raw = _read_bytes(images_path)
    if len(img_raw) < 16:
        raise IdxFormatError(f"{images_path}: truncated header")
    magic, count, rows, cols = struct.unpack(">IIII", img_raw[:16])
    if magic != IMAGE_MAGIC:
        raise IdxFormatError(f"{images_path}: magic {magic}, expected {IMAGE_MAGIC}")
    expected = 16 + count * rows * cols
    if len(img_raw) != expected:
        raise IdxFormatError(
            f"{images_path}: {len(img_raw)} bytes, header implies {expected}"
        )
    pixels = np.frombuffer(img_raw, dtype=np.uint8, offset=16)
    images = pixels.reshape(count, rows * cols).astype(np.float32) / 255.0

    lbl_raw = _read_bytes(labels_path)
    if len(lbl_raw) < 8:
        raise IdxFormatError(f"{labels_path}: truncated header")
    magic, lbl_count = struct.unpack(">II", lbl_raw[:8])
    if magic != LABEL_MAGIC:
        raise IdxFormatError(f"{labels_path}: magic {magic}, expected {LABEL_MAGIC}")
    if len(lbl_raw) != 8 + lbl_count:
        raise IdxFormatError(
            f"{labels_path}: {len(lbl_raw)} bytes, header implies {8 + lbl_count}"
        )
    if lbl_count != count:
        raise IdxFormatError(
            f"count mismatch: {count} images vs {lbl_count} labels"
        )
    labels = np.frombuffer(lbl_raw, dtype=np.uint8, offset=8).astype(np.int64)
    if labels.size and int(labels.max()) > 9:
        raise IdxFormatError(f"{labels_path}: labels outside [0, 9]")
    return DatasetShard(images, labels)


def _take(data: DatasetShard, idx: np.ndarray) -> DatasetShard:
    return DatasetShard(data.images[idx], data.labels[idx])


def partition(data: DatasetShard, plan: PartitionPlan) -> list[DatasetShard]:
    """Split ``data`` into ``plan.num_nodes`` disjoint shards that exhaust it."""
    n, gamma = len(data), plan.num_nodes
    if n < gamma:
        raise ValueError(f"cannot split {n} samples across {gamma} nodes")
    if plan.mode == IID:
        order = stream(plan.seed, "partition-iid").permutation(n)
        chunks = np.array_split(order, gamma)
    else:
        total = gamma * plan.shards_per_node
        if n < total:
            raise ValueError(f"label-skew split needs >= {total} samples, got {n}")
        by_label = np.argsort(data.labels, kind="stable")
        slivers = np.array_split(by_label, total)
        deal = stream(plan.seed, "partition-noniid").permutation(total)
        chunks = [
            np.concatenate(
                [slivers[deal[i * plan.shards_per_node + j]] for j in range(plan.shards_per_node)]
            )
            for i in range(gamma)
        ]
    return [_take(data, np.sort(chunk)) for chunk in chunks]


def an_validation_set(
    node_shard: DatasetShard, holdout_fraction: float, seed: int
) -> tuple[DatasetShard, DatasetShard]:
    """Seeded split into (train, validate); the holdout backs aggregation duty."""
    if not 0.0 < holdout_fraction < 1.0:
        raise ValueError(f"holdout_fraction must be in (0, 1), got {holdout_fraction}")
    n = len(node_shard)
    n_val = int(round(n * holdout_fraction))
    if n_val < 1 or n_val >= n:
        raise ValueError(f"degenerate split: {n} samples at fraction {holdout_fraction}")
    perm = stream(seed, "holdout").permutation(n)
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    return _take(node_shard, train_idx), _take(node_shard, val_idx)


def subsample(data: DatasetShard, size: int, seed: int) -> DatasetShard:
    """Seeded subsample without replacement; no-op when ``size >= len(data)``."""
    if size >= len(data):
        return data
    idx = np.sort(stream(seed, "subsample").choice(len(data), size=size, replace=False))
    return _take(data, idx)
