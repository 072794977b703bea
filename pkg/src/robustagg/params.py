"""Parameter vectors, layer partitions and the two distance metrics.

Vectors are plain 1-d ``float64`` numpy arrays. :func:`as_vector` is the
single validation point; everything else assumes its output.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when vector, partition or block dimensions disagree."""


class DistanceMetric(str, enum.Enum):
    SQ_EUCLIDEAN = "sq_euclidean"
    COSINE = "cosine"


def as_vector(values) -> np.ndarray:
    """Return ``values`` as a read-only, finite, 1-d float64 array."""
    v = np.array(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DimensionError(f"parameter vector must be 1-d and non-empty, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("parameter vector contains NaN or Inf")
    v.setflags(write=False)
    return v


def as_update_matrix(updates) -> np.ndarray:
    """Stack a sequence of equal-length updates into an ``(n, d)`` array."""
    X = np.array(updates, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise DimensionError(f"update set must be a non-empty (n, d) collection, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("update set contains NaN or Inf")
    return X


def _check_same_dim(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")


def norm(v) -> float:
    v = np.asarray(v, dtype=np.float64)
    return float(np.sqrt(np.dot(v, v)))


def sq_euclidean(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_dim(a, b)
    diff = a - b
    return float(np.dot(diff, diff))


def cosine_distance(a, b) -> float:
    """``1 - cos`` of the angle between ``a`` and ``b``; both must be nonzero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_dim(a, b)
    na, nb = norm(a), norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine distance is undefined for a zero-norm vector")
    return float(1.0 - np.dot(a, b) / (na * nb))


def pairwise_distances(X: np.ndarray, metric: DistanceMetric) -> np.ndarray:
    """Symmetric ``(n, n)`` matrix of pairwise distances between rows of ``X``.

    Both metrics are exactly symmetric with a zero diagonal.
    """
    metric = DistanceMetric(metric)
    n = X.shape[0]
    D = np.zeros((n, n))
    if metric is DistanceMetric.SQ_EUCLIDEAN:
        for i in range(n):
            diff = X[i + 1:] - X[i]
            row = np.einsum("ij,ij->i", diff, diff)
            D[i, i + 1:] = row
            D[i + 1:, i] = row
        return D
    norms = np.sqrt(np.einsum("ij,ij->i", X, X))
    if np.any(norms == 0.0):
        raise ValueError("cosine distance is undefined for a zero-norm vector")
    for i in range(n):
        dots = X[i + 1:] @ X[i]
        row = 1.0 - dots / (norms[i + 1:] * norms[i])
        D[i, i + 1:] = row
        D[i + 1:, i] = row
    return D


@dataclass(frozen=True)
class LayerPartition:
    """Ordered contiguous block sizes ``m_1..m_k`` of a ``d``-dim vector."""

    block_sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(m) for m in self.block_sizes)
        if len(sizes) == 0:
            raise ValueError("a layer partition needs at least one block")
        if any(m < 1 for m in sizes):
            raise ValueError(f"block sizes must be positive, got {sizes}")
        object.__setattr__(self, "block_sizes", sizes)

    @classmethod
    def trivial(cls, d: int) -> "LayerPartition":
        return cls((d,))

    @classmethod
    def equal(cls, d: int, k: int) -> "LayerPartition":
        if k < 1 or d % k:
            raise DimensionError(f"cannot split d={d} into {k} equal blocks")
        return cls((d // k,) * k)

    @property
    def k(self) -> int:
        return len(self.block_sizes)

    @property
    def dim(self) -> int:
        return sum(self.block_sizes)

    def slices(self) -> list[slice]:
        out, start = [], 0
        for m in self.block_sizes:
            out.append(slice(start, start + m))
            start += m
        return out

    def check(self, d: int) -> None:
        if self.dim != d:
            raise DimensionError(f"partition {self.block_sizes} sums to {self.dim}, vectors have d={d}")


def project(v, p: LayerPartition, j: int) -> np.ndarray:
    """Contiguous slice of ``v`` for block ``j`` (0-based)."""
    v = np.asarray(v, dtype=np.float64)
    p.check(v.shape[-1])
    if not 0 <= j < p.k:
        raise IndexError(f"block index {j} out of range for {p.k} blocks")
    return v[..., p.slices()[j]]


def concat(blocks: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(b, dtype=np.float64) for b in blocks], axis=-1)
