"""Minimal fully connected classifier trained with mini-batch SGD.

Model parameters live in a single flat vector plus per-layer shape metadata,
so the rest of the system (correlation, clustering, aggregation, hashing) can
treat a model as a plain numeric vector. Hidden layers use ReLU; the output
layer is linear and the loss is softmax cross-entropy.

Parameters are float32 by default; loss and accuracy reductions accumulate in
float64. All functions are pure and deterministic for fixed inputs and seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import DatasetShard
from .rng import stream


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes non-finite."""


@dataclass(frozen=True)
class LayerShape:
    """Shape of one affine layer: a rows x cols weight matrix plus optional bias."""

    rows: int
    cols: int
    has_bias: bool = True

    @property
    def size(self) -> int:
        return self.rows * self.cols + (self.cols if self.has_bias else 0)


@dataclass(frozen=True)
class ModelArch:
    """Layer widths of the classifier, input first, class logits last."""

    layer_dims: tuple[int, ...] = (784, 128, 10)

    def __post_init__(self) -> None:
        if len(self.layer_dims) < 2:
            raise ValueError("architecture needs at least input and output dims")
        if any(int(d) <= 0 for d in self.layer_dims):
            raise ValueError(f"layer dims must be positive, got {self.layer_dims}")
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))

    @property
    def layer_shapes(self) -> tuple[LayerShape, ...]:
        dims = self.layer_dims
        return tuple(LayerShape(a, b) for a, b in zip(dims[:-1], dims[1:]))

    @property
    def param_count(self) -> int:
        return sum(s.size for s in self.layer_shapes)


@dataclass(frozen=True)
class ParamVector:
    """Flat parameter vector plus the layer shapes needed to unflatten it."""

    values: np.ndarray
    shapes: tuple[LayerShape, ...]

    def __post_init__(self) -> None:
        expected = sum(s.size for s in self.shapes)
        if self.values.ndim != 1 or self.values.shape[0] != expected:
            raise ValueError(
                f"parameter vector has {self.values.shape} values, shapes require {expected}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("parameter values must be finite")

    def __len__(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class Hyperparams:
    """Local-training knobs; defaults are the simulator's standard settings."""

    batch_size: int = 10
    optimizer: str = "sgd"
    learning_rate: float = 0.01
    local_epochs: int = 5

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.local_epochs < 1:
            raise ValueError("batch_size and local_epochs must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.optimizer != "sgd":
            raise ValueError(f"unsupported optimizer: {self.optimizer!r}")


def init_model(arch: ModelArch, seed: int) -> ParamVector:
    """Seeded uniform initialization scaled by fan-in/fan-out; biases zero."""
    rng = stream(seed, "model-init")
    parts: list[np.ndarray] = []
    for shape in arch.layer_shapes:
        bound = math.sqrt(6.0 / (shape.rows + shape.cols))
        parts.append(rng.uniform(-bound, bound, shape.rows * shape.cols))
        if shape.has_bias:
            parts.append(np.zeros(shape.cols))
    values = np.concatenate(parts).astype(np.float32)
    return ParamVector(values, arch.layer_shapes)


def flatten(params: ParamVector) -> np.ndarray:
    """All layers concatenated in declaration order (weights row-major, then bias)."""
    return params.values


def unflatten(values: np.ndarray, shapes: tuple[LayerShape, ...]) -> ParamVector:
    """Rebuild a ParamVector from a flat vector; inverse of ``flatten``."""
    return ParamVector(np.asarray(values), tuple(shapes))


def _split_layers(
    values: np.ndarray, shapes: tuple[LayerShape, ...]
) -> list[tuple[np.ndarray, np.ndarray | None]]:
    layers = []
    offset = 0
    for s in shapes:
        w = values[offset : offset + s.rows * s.cols].reshape(s.rows, s.cols)
        offset += s.rows * s.cols
        b = None
        if s.has_bias:
            b = values[offset : offset + s.cols]
            offset += s.cols
        layers.append((w, b))
    return layers


def _forward(
    layers: list[tuple[np.ndarray, np.ndarray | None]], x: np.ndarray
) -> list[np.ndarray]:
    """Activations per layer; the last entry holds the raw logits."""
    acts = [x]
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        z = acts[-1] @ w
        if b is not None:
            z = z + b
        if i < last:
            z = np.maximum(z, 0)
        acts.append(z)
    return acts


def _softmax_nll(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy (float64) and d(loss)/d(logits).

    Uses the log-sum-exp form so the loss stays finite for any finite logits;
    a non-finite loss therefore really means the parameters diverged.
    """
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(logits.shape[0])
    loss = float(np.mean(-log_probs[rows, labels], dtype=np.float64))
    dlogits = np.exp(log_probs)
    dlogits[rows, labels] -= 1
    dlogits /= logits.shape[0]
    return loss, dlogits


def _loss_and_grad_raw(
    values: np.ndarray,
    shapes: tuple[LayerShape, ...],
    images: np.ndarray,
    labels: np.ndarray,
) -> tuple[float, np.ndarray]:
    layers = _split_layers(values, shapes)
    acts = _forward(layers, images)
    loss, dz = _softmax_nll(acts[-1], labels)
    grad = np.empty_like(values)
    offset = len(values)
    for i in range(len(layers) - 1, -1, -1):
        w, b = layers[i]
        if b is not None:
            gb = dz.sum(axis=0)
            offset -= b.shape[0]
            grad[offset : offset + b.shape[0]] = gb
        gw = acts[i].T @ dz
        offset -= w.size
        grad[offset : offset + w.size] = gw.ravel()
        if i > 0:
            dz = (dz @ w.T) * (acts[i] > 0)
    return loss, grad


def value_and_grad(
    params: ParamVector, images: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Cross-entropy loss and its gradient as a flat vector matching ``params``."""
    return _loss_and_grad_raw(params.values, params.shapes, images, labels)


def evaluate_loss(params: ParamVector, data: DatasetShard) -> float:
    """Mean cross-entropy of the model over a shard."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty shard")
    layers = _split_layers(params.values, params.shapes)
    logits = _forward(layers, data.images)[-1]
    loss, _ = _softmax_nll(logits, data.labels)
    return loss


def evaluate_accuracy(params: ParamVector, data: DatasetShard) -> float:
    """Fraction of samples whose argmax logit matches the label.

    Ties go to the lowest class index (np.argmax picks the first maximum).
    """
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty shard")
    layers = _split_layers(params.values, params.shapes)
    logits = _forward(layers, data.images)[-1]
    preds = np.argmax(logits, axis=1)
    return float(np.mean(preds == data.labels, dtype=np.float64))


def local_train(
    start: ParamVector, shard: DatasetShard, hp: Hyperparams, seed: int
) -> ParamVector:
    """Run mini-batch SGD for ``hp.local_epochs`` epochs and return new parameters.

    Batch order is drawn from a stream keyed by (seed, epoch), so the result is
    bitwise reproducible for fixed inputs. Raises TrainingDivergedError if the
    loss stops being finite.
    """
    n = len(shard)
    if n == 0:
        raise ValueError("cannot train on an empty shard")
    values = start.values.copy()
    lr = values.dtype.type(hp.learning_rate)
    for epoch in range(hp.local_epochs):
        order = stream(seed, "batch-order", epoch).permutation(n)
        for lo in range(0, n, hp.batch_size):
            idx = order[lo : lo + hp.batch_size]
            loss, grad = _loss_and_grad_raw(values, start.shapes, shard.images[idx], shard.labels[idx])
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {loss!r} at epoch {epoch}, batch offset {lo}"
                )
            values -= lr * grad
    return ParamVector(values, start.shapes)
