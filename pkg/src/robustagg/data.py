"""Synthetic Gaussian-blob tasks and federated partitioning."""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass

import numpy as np

from .learning import Dataset


class Scheme(str, enum.Enum):
    IID = "iid"
    DIRICHLET = "dirichlet"


@dataclass(frozen=True)
class FederationPlan:
    """How a dataset is split across clients.

    ``alpha`` is the Dirichlet concentration and only applies to the
    ``dirichlet`` scheme, which also drops clients holding fewer than
    ``min_samples_per_client`` examples.
    """

    num_clients: int
    scheme: Scheme = Scheme.IID
    alpha: float = 1.0
    min_samples_per_client: int = 30

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if self.num_clients < 1:
            raise ValueError("num_clients must be positive")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.min_samples_per_client < 0:
            raise ValueError("min_samples_per_client must be nonnegative")


def make_blobs(num_classes: int, input_dim: int, per_class: int, spread: float, seed, noise: float = 1.0) -> Dataset:
    """Gaussian clusters around random unit-norm centers scaled by ``spread``.

    Each example is its class center plus isotropic noise of standard
    deviation ``noise``. Rows are grouped by class.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((num_classes, input_dim))
    centers *= spread / np.linalg.norm(centers, axis=1, keepdims=True)
    labels = np.repeat(np.arange(num_classes), per_class)
    X = centers[labels] + noise * rng.standard_normal((labels.size, input_dim))
    return Dataset(X, labels)


def blob_task(num_classes, input_dim, per_class, test_per_class, spread, seed, noise=1.0) -> tuple[Dataset, Dataset]:
    """Train and test sets drawn from the same blob distribution."""
    full = make_blobs(num_classes, input_dim, per_class + test_per_class, spread, seed, noise)
    per_label = np.arange(len(full)) % (per_class + test_per_class)
    train = full.subset(np.flatnonzero(per_label < per_class))
    test = full.subset(np.flatnonzero(per_label >= per_class))
    return train, test


def federate_indices(labels, plan: FederationPlan, seed) -> list[np.ndarray]:
    """Index shards into ``labels`` for every kept client."""
    labels = np.asarray(labels)
    N = labels.size
    if N == 0:
        raise ValueError("cannot federate an empty dataset")
    if plan.num_clients > N:
        raise ValueError(f"{plan.num_clients} clients but only {N} examples")
    rng = np.random.default_rng(seed)
    if plan.scheme is Scheme.IID:
        return [np.sort(s) for s in np.array_split(rng.permutation(N), plan.num_clients)]

    shards: list[list[int]] = [[] for _ in range(plan.num_clients)]
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        props = rng.dirichlet(np.full(plan.num_clients, plan.alpha))
        cuts = (np.cumsum(props)[:-1] * idx.size).astype(int)
        for client, part in enumerate(np.split(idx, cuts)):
            shards[client].extend(part.tolist())
    kept = [np.sort(np.array(s, dtype=np.int64)) for s in shards if len(s) >= plan.min_samples_per_client]
    return [s for s in kept if s.size > 0]


def federate(data: Dataset, plan: FederationPlan, seed) -> list[Dataset]:
    return [data.subset(s) for s in federate_indices(data.labels, plan, seed)]


def save_dataset(data: Dataset, path) -> None:
    """Write ``rows,input_dim`` then one comma-separated example per line, label last."""
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w") as fh:
        fh.write(f"{len(data)},{data.features.shape[1]}\n")
        for x, y in zip(data.features, data.labels):
            fh.write(",".join(repr(float(v)) for v in x) + f",{int(y)}\n")
    os.replace(tmp, path)


def load_dataset(path) -> Dataset:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows, dim = int(header[0]), int(header[1])
        X = np.empty((rows, dim))
        y = np.empty(rows, dtype=np.int64)
        for i in range(rows):
            fields = fh.readline().strip().split(",")
            if len(fields) != dim + 1:
                raise ValueError(f"{path}:{i + 2}: expected {dim + 1} fields, got {len(fields)}")
            X[i] = [float(v) for v in fields[:dim]]
            y[i] = int(fields[dim])
    return Dataset(X, y)
