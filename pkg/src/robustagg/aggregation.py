"""Robust aggregation operators and the combinators built on top of them.

Every operator takes an ``(n, d)`` array of client updates and returns an
:class:`AggregationOutcome`. Client indices are 0-based and ties are always
resolved in favour of the lowest index.

The four experimental variants of each base operator are produced by
:func:`aggregate` from an :class:`AggregatorSpec`:

==================  ============  ==========  =========
variant             metric        clip        layerwise
==================  ============  ==========  =========
original            sq_euclidean  none        no
layerwise           sq_euclidean  none        yes
cosine              cosine        median      no
layerwise_cosine    cosine        median      yes
==================  ============  ==========  =========
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .params import DistanceMetric, LayerPartition, as_update_matrix, pairwise_distances


class BaseRule(str, enum.Enum):
    FEDAVG = "fedavg"
    KRUM = "krum"
    BULYAN = "bulyan"
    GEOMED = "geomed"


class ClipMode(str, enum.Enum):
    NONE = "none"
    MEDIAN = "median"


class ClipScope(str, enum.Enum):
    BLOCK = "block"
    GLOBAL = "global"


class AggregationError(ValueError):
    """Raised when an operator cannot run on the given update set."""


class RobustnessRegimeWarning(UserWarning):
    """Emitted when ``f >= n/2 - 1``, outside the regime Krum's guarantee covers."""


VARIANTS: dict[str, tuple[DistanceMetric, ClipMode, bool]] = {
    "original": (DistanceMetric.SQ_EUCLIDEAN, ClipMode.NONE, False),
    "layerwise": (DistanceMetric.SQ_EUCLIDEAN, ClipMode.NONE, True),
    "cosine": (DistanceMetric.COSINE, ClipMode.MEDIAN, False),
    "layerwise_cosine": (DistanceMetric.COSINE, ClipMode.MEDIAN, True),
}

ROBUST_RULES = (BaseRule.KRUM, BaseRule.BULYAN, BaseRule.GEOMED)


@dataclass(frozen=True)
class AggregatorSpec:
    """Declarative description of an aggregation rule.

    ``f`` is the expected number of Byzantine updates and is only consulted
    by Krum and Bulyan. ``bulyan_trim`` switches Bulyan from the plain mean of
    its selection set to a coordinate-wise trimmed mean. ``clip_scope``
    decides whether a layerwise rule clips each block (default) or the full
    vector once before splitting.
    """

    base: BaseRule = BaseRule.FEDAVG
    metric: DistanceMetric = DistanceMetric.SQ_EUCLIDEAN
    clip: ClipMode = ClipMode.NONE
    layerwise: bool = False
    f: int = 0
    bulyan_m: int = 5
    bulyan_trim: bool = False
    clip_scope: ClipScope = ClipScope.BLOCK

    def __post_init__(self):
        object.__setattr__(self, "base", BaseRule(self.base))
        object.__setattr__(self, "metric", DistanceMetric(self.metric))
        object.__setattr__(self, "clip", ClipMode(self.clip))
        object.__setattr__(self, "clip_scope", ClipScope(self.clip_scope))
        if int(self.f) != self.f or self.f < 0:
            raise ValueError(f"f must be a nonnegative integer, got {self.f}")
        if int(self.bulyan_m) != self.bulyan_m or self.bulyan_m < 1:
            raise ValueError(f"bulyan_m must be a positive integer, got {self.bulyan_m}")
        object.__setattr__(self, "f", int(self.f))
        object.__setattr__(self, "bulyan_m", int(self.bulyan_m))
        if self.metric is DistanceMetric.COSINE and self.clip is not ClipMode.MEDIAN:
            raise ValueError("cosine distance requires median clipping (clip='median')")

    @classmethod
    def from_variant(cls, base, variant: str = "original", **kwargs) -> "AggregatorSpec":
        try:
            metric, clip, layerwise = VARIANTS[variant]
        except KeyError:
            raise ValueError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}") from None
        return cls(base=base, metric=metric, clip=clip, layerwise=layerwise, **kwargs)

    @property
    def variant(self) -> str | None:
        for name, combo in VARIANTS.items():
            if combo == (self.metric, self.clip, self.layerwise):
                return name
        return None

    def with_variant(self, variant: str) -> "AggregatorSpec":
        metric, clip, layerwise = VARIANTS[variant]
        return replace(self, metric=metric, clip=clip, layerwise=layerwise)

    def check_clients(self, n: int) -> None:
        """Check that this aggregator can handle ``n`` submitted updates."""
        if self.base in (BaseRule.KRUM, BaseRule.BULYAN):
            if n < self.f + 3:
                raise AggregationError(
                    f"insufficient clients for Krum neighborhood: n={n} < f+3={self.f + 3}"
                )
            if self.base is BaseRule.BULYAN and n < self.bulyan_m:
                raise AggregationError(f"Bulyan needs n >= m, got n={n} < m={self.bulyan_m}")
        if self.base is not BaseRule.FEDAVG and self.f > 0 and not self.f < n / 2 - 1:
            warnings.warn(
                f"f={self.f} with n={n} violates f < n/2 - 1; robustness is not guaranteed",
                RobustnessRegimeWarning,
                stacklevel=3,
            )


@dataclass
class AggregationOutcome:
    aggregate: np.ndarray
    selected_indices: tuple[int, ...] = ()
    diagnostics: dict[str, float] = field(default_factory=dict)
    # per-block winners, only filled by layerwise application
    block_selections: tuple[tuple[int, ...], ...] = ()


def median_clip(X) -> tuple[np.ndarray, float]:
    """Rescale every update above the lower median norm down to it.

    Returns the clipped copy and the threshold ``tau`` (the norm at sorted
    position ``(n - 1) // 2``).
    """
    X = as_update_matrix(X)
    norms = np.sqrt(np.einsum("ij,ij->i", X, X))
    if np.any(norms == 0.0):
        raise AggregationError("median clipping cannot rescale a zero-norm update")
    tau = float(np.sort(norms)[(len(norms) - 1) // 2])
    out = X.copy()
    over = norms > tau
    # normalise first, then scale: parallel rows in one dimension clip to
    # exactly +-tau, so ties created by clipping stay exact ties
    out[over] = (X[over] / norms[over][:, None]) * tau
    return out, tau


def krum_scores(X: np.ndarray, f: int, metric=DistanceMetric.SQ_EUCLIDEAN) -> np.ndarray:
    """Sum of distances from each update to its ``n - f - 2`` nearest others."""
    n = X.shape[0]
    q = n - f - 2
    if q < 1:
        raise AggregationError(f"insufficient clients for Krum neighborhood: n={n} < f+3={f + 3}")
    D = pairwise_distances(X, metric)
    np.fill_diagonal(D, np.inf)
    return np.sort(D, axis=1)[:, :q].sum(axis=1)


def krum(X, f: int, metric=DistanceMetric.SQ_EUCLIDEAN) -> AggregationOutcome:
    X = as_update_matrix(X)
    scores = krum_scores(X, f, metric)
    i = int(np.argmin(scores))
    return AggregationOutcome(X[i].copy(), (i,), {"score": float(scores[i])})


def bulyan(X, f: int, m: int = 5, metric=DistanceMetric.SQ_EUCLIDEAN, trim: bool = False) -> AggregationOutcome:
    """Mean of the ``m`` updates with the lowest Krum scores.

    With ``trim=True`` the mean is replaced by a coordinate-wise trimmed
    mean that drops ``min(f, (m - 1) // 2)`` values from each end.
    """
    X = as_update_matrix(X)
    n = X.shape[0]
    if n < m:
        raise AggregationError(f"Bulyan needs n >= m, got n={n} < m={m}")
    scores = krum_scores(X, f, metric)
    chosen = np.argsort(scores, kind="stable")[:m]
    S = X[chosen]
    if trim:
        b = min(f, (m - 1) // 2)
        S = np.sort(S, axis=0)[b:m - b]
    agg = S.sum(axis=0) / S.shape[0]
    return AggregationOutcome(
        agg, tuple(int(i) for i in chosen), {"score": float(scores[chosen[0]])}
    )


def geomed(X, metric=DistanceMetric.SQ_EUCLIDEAN) -> AggregationOutcome:
    """Medoid: the input minimising the summed distance to all inputs."""
    X = as_update_matrix(X)
    totals = pairwise_distances(X, metric).sum(axis=1)
    i = int(np.argmin(totals))
    return AggregationOutcome(X[i].copy(), (i,), {"score": float(totals[i])})


def fedavg(X) -> AggregationOutcome:
    X = as_update_matrix(X)
    return AggregationOutcome(X.sum(axis=0) / X.shape[0])


def layerwise(
    rule: Callable[[np.ndarray], AggregationOutcome],
    p: LayerPartition,
    X,
    clip: bool = False,
) -> AggregationOutcome:
    """Apply ``rule`` independently on every block of ``p`` and concatenate.

    With ``clip=True`` each block is median-clipped before its rule runs.
    """
    X = as_update_matrix(X)
    p.check(X.shape[1])
    parts, winners, diagnostics = [], [], {}
    tau_sq = 0.0
    for j, sl in enumerate(p.slices()):
        block = X[:, sl]
        if clip:
            block, tau = median_clip(block)
            diagnostics[f"block{j}.clip_threshold"] = tau
            tau_sq += tau * tau
        out = rule(block)
        parts.append(out.aggregate)
        winners.append(out.selected_indices)
        if out.selected_indices:
            diagnostics[f"block{j}.winner"] = float(out.selected_indices[0])
    if clip:
        diagnostics["clip_threshold"] = float(np.sqrt(tau_sq))
    seen: dict[int, None] = {}
    for w in winners:
        seen.update(dict.fromkeys(w))
    return AggregationOutcome(
        np.concatenate(parts), tuple(seen), diagnostics, tuple(winners)
    )


def base_rule(spec: AggregatorSpec) -> Callable[[np.ndarray], AggregationOutcome]:
    """The unwrapped operator of ``spec`` (no clipping, no layerwise)."""
    if spec.base is BaseRule.FEDAVG:
        return fedavg
    if spec.base is BaseRule.KRUM:
        return lambda X: krum(X, spec.f, spec.metric)
    if spec.base is BaseRule.BULYAN:
        return lambda X: bulyan(X, spec.f, spec.bulyan_m, spec.metric, spec.bulyan_trim)
    return lambda X: geomed(X, spec.metric)


def aggregate(spec: AggregatorSpec, p: LayerPartition | None, X) -> AggregationOutcome:
    """Run the full pipeline: optional clipping, base rule, optional layerwise."""
    X = as_update_matrix(X)
    n, d = X.shape
    spec.check_clients(n)
    p = p if p is not None else LayerPartition.trivial(d)
    p.check(d)
    rule = base_rule(spec)
    clipping = spec.clip is ClipMode.MEDIAN

    if spec.layerwise and not (clipping and spec.clip_scope is ClipScope.GLOBAL):
        return layerwise(rule, p, X, clip=clipping)

    tau = None
    if clipping:
        X, tau = median_clip(X)
    out = layerwise(rule, p, X) if spec.layerwise else rule(X)
    if tau is not None:
        out.diagnostics["clip_threshold"] = tau
    return out
