"""Adversarial client behaviours."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .learning import Dataset
from .params import DimensionError


class AttackKind(str, enum.Enum):
    NONE = "none"
    LABEL_FLIP = "label_flip"
    RANDOM_GAUSSIAN = "random_gaussian"


@dataclass(frozen=True)
class AttackSpec:
    """What adversarial clients do.

    ``fraction`` is the share of an adversary's examples relabelled
    (``label_flip``); ``sigma`` is the entry scale of ``random_gaussian``
    updates. With ``boost`` the transmitted delta is scaled by ``n / eta``.
    """

    kind: AttackKind = AttackKind.NONE
    fraction: float = 1.0
    sigma: float = 1.0
    boost: bool = False
    byzantine_fraction: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind(self.kind))
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("fraction must lie in [0, 1]")
        if not self.sigma >= 0:
            raise ValueError("sigma must be nonnegative")
        if not 0.0 <= self.byzantine_fraction < 1.0:
            raise ValueError("byzantine_fraction must lie in [0, 1)")


def flip_labels(data: Dataset, fraction: float, num_classes: int, seed) -> Dataset:
    """Resample the labels of ``floor(fraction * N)`` random examples.

    New labels are uniform over all classes, so a flipped label may
    coincide with the original one.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    N = len(data)
    k = int(np.floor(fraction * N))
    labels = data.labels.copy()
    if k:
        idx = rng.choice(N, size=k, replace=False)
        labels[idx] = rng.integers(0, num_classes, size=k)
    return Dataset(data.features, labels)


def boost_update(v_adv, v_global, n: int, eta: float = 1.0) -> np.ndarray:
    """Model-replacement delta ``(n / eta) * (v_adv - v_global)``."""
    if not eta > 0:
        raise ValueError("eta must be positive")
    v_adv = np.asarray(v_adv, dtype=np.float64)
    v_global = np.asarray(v_global, dtype=np.float64)
    if v_adv.shape != v_global.shape:
        raise DimensionError(f"dimension mismatch: {v_adv.shape} vs {v_global.shape}")
    return (n / eta) * (v_adv - v_global)


def random_byzantine(d: int, sigma: float, seed) -> np.ndarray:
    if d < 1:
        raise ValueError("d must be positive")
    return sigma * np.random.default_rng(seed).standard_normal(d)
