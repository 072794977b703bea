"""Small numpy models with hand-written gradients and local optimisers.

Parameters travel as one flat vector. The canonical layout is row-major
weights followed by bias for each layer, which is also the layer partition
used by layerwise aggregation:

* softmax regression: ``[W (in x C), b (C)]``
* one-hidden-layer ReLU MLP: ``[W1 (in x H), b1 (H), W2 (H x C), b2 (C)]``
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .params import DimensionError, LayerPartition


class ModelKind(str, enum.Enum):
    SOFTMAX = "softmax"
    MLP1 = "mlp1"


class OptimizerKind(str, enum.Enum):
    SGD = "sgd"
    ADAM = "adam"


@dataclass(frozen=True)
class ModelArch:
    kind: ModelKind
    input_dim: int
    num_classes: int
    hidden_dim: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind(self.kind))
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.kind is ModelKind.MLP1 and self.hidden_dim < 1:
            raise ValueError("an MLP needs a positive hidden_dim")

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        i, c, h = self.input_dim, self.num_classes, self.hidden_dim
        if self.kind is ModelKind.SOFTMAX:
            return [(i, c), (c,)]
        return [(i, h), (h,), (h, c), (c,)]

    @property
    def partition(self) -> LayerPartition:
        return LayerPartition(tuple(int(np.prod(s)) for s in self.shapes))

    @property
    def dim(self) -> int:
        return self.partition.dim


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels)
        if X.ndim != 2:
            raise DimensionError(f"features must be a 2-d matrix, got shape {X.shape}")
        if y.shape != (X.shape[0],):
            raise DimensionError(f"{X.shape[0]} rows but {y.shape} labels")
        if not np.all(np.isfinite(X)):
            raise ValueError("features contain NaN or Inf")
        if y.size and (y.min() < 0 or not np.issubdtype(y.dtype, np.integer)):
            raise ValueError("labels must be nonnegative integers")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y.astype(np.int64))

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx])


@dataclass(frozen=True)
class OptimizerSpec:
    kind: OptimizerKind = OptimizerKind.ADAM
    learning_rate: float = 0.001
    epochs_per_round: int = 10
    batch_size: int = 32
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "kind", OptimizerKind(self.kind))
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs_per_round < 0:
            raise ValueError("epochs_per_round must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


def unflatten(arch: ModelArch, params) -> list[np.ndarray]:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (arch.dim,):
        raise DimensionError(f"expected {arch.dim} parameters, got {params.shape}")
    return [params[sl].reshape(shape) for sl, shape in zip(arch.partition.slices(), arch.shapes)]


def flatten(tensors) -> np.ndarray:
    return np.concatenate([np.asarray(t, dtype=np.float64).reshape(-1) for t in tensors])


def init_params(arch: ModelArch, seed) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    tensors = []
    for shape in arch.shapes:
        if len(shape) == 2:
            bound = 1.0 / np.sqrt(shape[0])
            tensors.append(rng.uniform(-bound, bound, size=shape))
        else:
            tensors.append(np.zeros(shape))
    return flatten(tensors)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _forward(arch: ModelArch, tensors, X):
    if arch.kind is ModelKind.SOFTMAX:
        W, b = tensors
        return X @ W + b, None
    W1, b1, W2, b2 = tensors
    z1 = X @ W1 + b1
    h = np.maximum(z1, 0.0)
    return h @ W2 + b2, (z1, h)


def logits(arch: ModelArch, params, X) -> np.ndarray:
    return _forward(arch, unflatten(arch, params), np.asarray(X, dtype=np.float64))[0]


def loss_and_grad(arch: ModelArch, params, X, y) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its exact gradient."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[1] != arch.input_dim:
        raise DimensionError(f"batch must have {arch.input_dim} columns, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    tensors = unflatten(arch, params)
    out, cache = _forward(arch, tensors, X)
    logp = _log_softmax(out)
    N = X.shape[0]
    rows = np.arange(N)
    loss = float(-logp[rows, y].sum() / N)

    dlogits = np.exp(logp)
    dlogits[rows, y] -= 1.0
    dlogits /= N
    if arch.kind is ModelKind.SOFTMAX:
        return loss, flatten([X.T @ dlogits, dlogits.sum(axis=0)])
    W1, b1, W2, b2 = tensors
    z1, h = cache
    dh = dlogits @ W2.T
    dz1 = dh * (z1 > 0.0)
    return loss, flatten([X.T @ dz1, dz1.sum(axis=0), h.T @ dlogits, dlogits.sum(axis=0)])


def evaluate(arch: ModelArch, params, data: Dataset) -> tuple[float, float]:
    """Mean cross-entropy and top-1 accuracy on ``data``."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    out = logits(arch, params, data.features)
    logp = _log_softmax(out)
    loss = float(-logp[np.arange(len(data)), data.labels].mean())
    acc = float((out.argmax(axis=1) == data.labels).mean())
    return loss, acc


def train_local(arch: ModelArch, start, data: Dataset, opt: OptimizerSpec, seed) -> np.ndarray:
    """Mini-batch training from ``start``; a fresh optimiser state per call."""
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    w = np.array(start, dtype=np.float64)
    if w.shape != (arch.dim,):
        raise DimensionError(f"expected {arch.dim} parameters, got {w.shape}")
    rng = np.random.default_rng(seed)
    N = len(data)
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    step = 0
    for _ in range(opt.epochs_per_round):
        order = rng.permutation(N)
        for lo in range(0, N, opt.batch_size):
            idx = order[lo:lo + opt.batch_size]
            _, g = loss_and_grad(arch, w, data.features[idx], data.labels[idx])
            if opt.kind is OptimizerKind.SGD:
                w -= opt.learning_rate * g
                continue
            step += 1
            m = opt.adam_beta1 * m + (1 - opt.adam_beta1) * g
            v = opt.adam_beta2 * v + (1 - opt.adam_beta2) * g * g
            m_hat = m / (1 - opt.adam_beta1 ** step)
            v_hat = v / (1 - opt.adam_beta2 ** step)
            w -= opt.learning_rate * m_hat / (np.sqrt(v_hat) + opt.adam_epsilon)
    return w
