"""Dense multilayer perceptron with hand-written forward and backward passes.

Parameters live in a single flat float64 vector so that client updates,
gradients and unlearning directions are plain vectors the geometry kernels
in :mod:`orthounlearn.linalg` can operate on directly.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from enum import Enum

import numpy as np
import numpy.typing as npt

from orthounlearn.errors import ConfigurationError, NumericalError

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.int64]
GradVec = FloatArray
LayerShapes = tuple[tuple[int, int], ...]

# Lower clamp for probabilities inside unbounded logarithms
PROB_EPS = 1e-12

__all__ = [
    "PROB_EPS",
    "Batch",
    "GradVec",
    "LossKind",
    "ModelParams",
    "backward",
    "ce_loss",
    "forward",
    "init_model",
    "local_train",
    "loss_value",
    "predict",
    "uce_loss",
    "uce_unscaled_loss",
]


class LossKind(str, Enum):
    """Loss a client minimizes during local training."""

    CE = "ce"
    UCE = "uce"
    UCE_UNSCALED = "uce_unscaled"


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Flat parameter vector of a dense network plus its layer shapes.

    Layer ``l`` occupies ``in_l * out_l`` weights (row-major, ``in x out``)
    followed by ``out_l`` biases.
    """

    flat: FloatArray
    shapes: LayerShapes

    def __post_init__(self) -> None:
        """Validate shape chaining, length and finiteness."""
        shapes = tuple((int(i), int(o)) for i, o in self.shapes)
        if not shapes:
            raise ConfigurationError("model needs at least one layer")
        for (_, out_dim), (in_dim, _) in zip(shapes, shapes[1:]):
            if out_dim != in_dim:
                raise ConfigurationError(f"layer shapes do not chain: {shapes}")
        flat = np.asarray(self.flat, dtype=np.float64)
        expected = sum(i * o + o for i, o in shapes)
        if flat.ndim != 1 or flat.size != expected:
            raise ConfigurationError(
                f"flat vector has {flat.size} entries, layer shapes need {expected}"
            )
        if not np.all(np.isfinite(flat)):
            raise NumericalError("model parameters contain non-finite values")
        object.__setattr__(self, "flat", flat)
        object.__setattr__(self, "shapes", shapes)

    @property
    def size(self) -> int:
        """Number of parameters D."""
        return int(self.flat.size)

    @property
    def input_dim(self) -> int:
        """Width of the input layer."""
        return self.shapes[0][0]

    @property
    def n_classes(self) -> int:
        """Number of output classes C."""
        return self.shapes[-1][1]

    def layers(self) -> list[tuple[FloatArray, FloatArray]]:
        """Views of (weights, bias) per layer into the flat vector."""
        views = []
        offset = 0
        for in_dim, out_dim in self.shapes:
            weights = self.flat[offset : offset + in_dim * out_dim].reshape(in_dim, out_dim)
            offset += in_dim * out_dim
            bias = self.flat[offset : offset + out_dim]
            offset += out_dim
            views.append((weights, bias))
        return views

    def with_flat(self, flat: FloatArray) -> ModelParams:
        """Return a model with the same shapes and new parameters."""
        return ModelParams(flat=flat, shapes=self.shapes)

    @classmethod
    def zeros(cls, shapes: Sequence[tuple[int, int]]) -> ModelParams:
        """All-zero model with the given layer shapes."""
        size = sum(i * o + o for i, o in shapes)
        return cls(flat=np.zeros(size), shapes=tuple(shapes))


@dataclass(frozen=True, eq=False)
class Batch:
    """Feature rows with integer class labels."""

    features: FloatArray
    labels: IntArray

    def __post_init__(self) -> None:
        """Normalize dtypes and check row counts."""
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2:
            raise ConfigurationError(f"features must be 2-D, got shape {features.shape}")
        if labels.ndim != 1 or labels.shape[0] != features.shape[0]:
            raise ConfigurationError(
                f"{features.shape[0]} feature rows but {labels.shape[0]} labels"
            )
        if labels.size and labels.min() < 0:
            raise ConfigurationError("labels must be non-negative")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dim(self) -> int:
        """Feature width."""
        return int(self.features.shape[1])

    def subset(self, index: npt.ArrayLike) -> Batch:
        """Rows selected by an index array or boolean mask."""
        return Batch(features=self.features[index], labels=self.labels[index])

    @classmethod
    def concat(cls, batches: Sequence[Batch]) -> Batch:
        """Stack batches row-wise."""
        return cls(
            features=np.concatenate([b.features for b in batches], axis=0),
            labels=np.concatenate([b.labels for b in batches]),
        )


def init_model(layer_sizes: Sequence[int], rng: np.random.Generator) -> ModelParams:
    """Glorot-uniform weights and zero biases.

    Args:
        layer_sizes: Widths from input to output, e.g. ``[64, 32, 4]``.
        rng: Generator the weights are drawn from.

    Returns:
        Freshly initialized model.
    """
    if len(layer_sizes) < 2:
        raise ConfigurationError("need at least input and output widths")
    shapes = tuple(zip(layer_sizes[:-1], layer_sizes[1:]))
    chunks = []
    for in_dim, out_dim in shapes:
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        chunks.append(rng.uniform(-limit, limit, size=in_dim * out_dim))
        chunks.append(np.zeros(out_dim))
    return ModelParams(flat=np.concatenate(chunks), shapes=shapes)


def _softmax(logits: FloatArray) -> FloatArray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def _check_inputs(model: ModelParams, batch: Batch) -> None:
    if batch.dim != model.input_dim:
        raise ConfigurationError(
            f"batch has {batch.dim} features, model expects {model.input_dim}"
        )
    if len(batch) and batch.labels.max() >= model.n_classes:
        raise ConfigurationError(
            f"label {int(batch.labels.max())} out of range for {model.n_classes} classes"
        )


def _forward(model: ModelParams, features: FloatArray) -> tuple[list[FloatArray], FloatArray]:
    """Layer inputs (ReLU outputs for hidden layers) and output probabilities."""
    activations = [features]
    layers = model.layers()
    out = features
    for idx, (weights, bias) in enumerate(layers):
        z = out @ weights + bias
        if idx < len(layers) - 1:
            out = np.maximum(z, 0.0)
            activations.append(out)
        else:
            out = z
    return activations, _softmax(out)


def forward(model: ModelParams, batch: Batch) -> FloatArray:
    """Class probabilities, one row per sample.

    Raises:
        ConfigurationError: If the batch width does not match the model.
    """
    _check_inputs(model, batch)
    _, probs = _forward(model, batch.features)
    return probs


def predict(model: ModelParams, features: FloatArray) -> IntArray:
    """Arg-max class per row."""
    if features.shape[1] != model.input_dim:
        raise ConfigurationError(
            f"features have {features.shape[1]} columns, model expects {model.input_dim}"
        )
    _, probs = _forward(model, features)
    return probs.argmax(axis=1)


def _true_class_probs(probs: FloatArray, labels: IntArray) -> FloatArray:
    return probs[np.arange(labels.shape[0]), labels]


def ce_loss(probs: FloatArray, labels: IntArray) -> float:
    """Mean cross-entropy ``-log p_y`` with ``p_y`` clamped at :data:`PROB_EPS`."""
    p_true = _true_class_probs(probs, labels)
    return float(np.mean(-np.log(np.maximum(p_true, PROB_EPS))))


def uce_loss(probs: FloatArray, labels: IntArray) -> float:
    """Mean unlearning cross-entropy ``-log(1 - p_y / 2)``, bounded by log 2."""
    p_true = _true_class_probs(probs, labels)
    return float(np.mean(-np.log1p(-p_true / 2.0)))


def uce_unscaled_loss(probs: FloatArray, labels: IntArray) -> float:
    """Mean ``-log(1 - p_y)``; unbounded as ``p_y`` approaches 1."""
    p_true = _true_class_probs(probs, labels)
    return float(np.mean(-np.log(np.maximum(1.0 - p_true, PROB_EPS))))


_LOSSES = {
    LossKind.CE: ce_loss,
    LossKind.UCE: uce_loss,
    LossKind.UCE_UNSCALED: uce_unscaled_loss,
}


def loss_value(probs: FloatArray, labels: IntArray, loss: LossKind) -> float:
    """Evaluate the mean loss of the given kind."""
    return _LOSSES[LossKind(loss)](probs, labels)


def _logit_gradient(probs: FloatArray, labels: IntArray, loss: LossKind) -> FloatArray:
    """Per-sample derivative of the loss with respect to the logits."""
    rows = np.arange(labels.shape[0])
    onehot = np.zeros_like(probs)
    onehot[rows, labels] = 1.0
    if loss is LossKind.CE:
        return probs - onehot
    p_true = probs[rows, labels]
    # d p_y / d z_k = p_y (delta_yk - p_k)
    if loss is LossKind.UCE:
        coef = p_true / (2.0 - p_true)
    else:
        coef = p_true / np.maximum(1.0 - p_true, PROB_EPS)
    return coef[:, None] * (onehot - probs)


def backward(model: ModelParams, batch: Batch, loss: LossKind) -> GradVec:
    """Gradient of the mean batch loss with respect to the flat parameters.

    Raises:
        ConfigurationError: If the batch does not fit the model.
        NumericalError: If any layer produces a non-finite gradient.
    """
    _check_inputs(model, batch)
    loss = LossKind(loss)
    activations, probs = _forward(model, batch.features)
    delta = _logit_gradient(probs, batch.labels, loss) / max(len(batch), 1)

    layers = model.layers()
    pieces: list[FloatArray] = []
    for idx in range(len(layers) - 1, -1, -1):
        weights, _ = layers[idx]
        layer_input = activations[idx]
        grad_w = layer_input.T @ delta
        grad_b = delta.sum(axis=0)
        if not (np.all(np.isfinite(grad_w)) and np.all(np.isfinite(grad_b))):
            raise NumericalError(f"non-finite gradient in layer {idx}")
        pieces.append(grad_b)
        pieces.append(grad_w.ravel())
        if idx > 0:
            delta = (delta @ weights.T) * (layer_input > 0.0)
    pieces.reverse()
    return np.concatenate(pieces)


def local_train(
    model: ModelParams,
    data: Batch,
    lr: float,
    epochs: int,
    batch_size: int | None,
    loss: LossKind,
    rng: np.random.Generator,
) -> tuple[ModelParams, GradVec]:
    """Run local SGD and report the displacement-derived gradient.

    Args:
        model: Broadcast global model (not modified).
        data: Client training rows.
        lr: Local step size.
        epochs: Passes over the data.
        batch_size: Mini-batch size, or None for full batch.
        loss: Loss the client minimizes.
        rng: Generator used to shuffle mini-batches.

    Returns:
        Tuple of (local model, ``(model - local) / lr``).

    Raises:
        ConfigurationError: On a non-positive step, zero epochs or empty data.
    """
    if lr <= 0:
        raise ConfigurationError(f"learning rate must be positive, got {lr}")
    if epochs < 1:
        raise ConfigurationError(f"epochs must be >= 1, got {epochs}")
    n_rows = len(data)
    if n_rows == 0:
        raise ConfigurationError("cannot train on an empty dataset")

    step = n_rows if batch_size is None else max(1, min(batch_size, n_rows))
    flat = model.flat.copy()
    for _ in range(epochs):
        if step >= n_rows:
            grad = backward(model.with_flat(flat), data, loss)
            flat -= lr * grad
            continue
        order = rng.permutation(n_rows)
        for start in range(0, n_rows, step):
            grad = backward(model.with_flat(flat), data.subset(order[start : start + step]), loss)
            flat -= lr * grad

    local = model.with_flat(flat)
    return local, (model.flat - flat) / lr
