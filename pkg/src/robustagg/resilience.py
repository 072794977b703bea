"""Monte-Carlo estimates of (alpha, f)-Byzantine resilience.

A scenario draws ``n - f`` benign vectors ``g + N(0, sigma^2 I)`` and ``f``
zero-mean Gaussian Byzantine vectors per trial, aggregates them and
accumulates statistics of the outputs ``F``.

Two angles are reported:

``alpha_hat``
    the angle between the empirical mean output and ``g``.
``alpha_bound``
    the smallest alpha for which ``<E F, g> >= (1 - sin alpha) ||g||^2``
    holds, i.e. ``arcsin(clip(1 - <E F, g> / ||g||^2, 0, 1))``.

``alpha_hat`` only sees the direction of ``E F``; a rule that shrinks its
output towards zero keeps ``alpha_hat`` near zero while ``alpha_bound``
grows. Both carry a delta-method standard error.

The moment condition cannot be falsified from finite samples; it is
reported as the ratios ``E||F||^r / E||G||^r`` for ``r = 2, 3, 4``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .aggregation import AggregatorSpec, aggregate
from .attacks import random_byzantine
from .params import LayerPartition

MOMENT_ORDERS = (2, 3, 4)


class GDirection(str, enum.Enum):
    FIRST = "first"
    UNIFORM = "uniform"


@dataclass(frozen=True)
class ResilienceScenario:
    n: int
    f: int
    d: int
    sigma: float
    trials: int = 2000
    g_norm: float = 1.0
    g_direction: GDirection = GDirection.FIRST
    byz_sigma: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "g_direction", GDirection(self.g_direction))
        if self.n < 1 or self.d < 1 or self.trials < 1:
            raise ValueError("n, d and trials must be positive")
        if not 0 <= self.f < self.n:
            raise ValueError(f"f must lie in [0, n), got f={self.f}, n={self.n}")
        if self.sigma < 0 or self.byz_sigma < 0 or not self.g_norm > 0:
            raise ValueError("sigma and byz_sigma must be nonnegative, g_norm positive")

    @property
    def g(self) -> np.ndarray:
        if self.g_direction is GDirection.FIRST:
            g = np.zeros(self.d)
            g[0] = self.g_norm
            return g
        return np.full(self.d, self.g_norm / math.sqrt(self.d))

    def draw(self, seed, trial: int) -> np.ndarray:
        """The ``(n, d)`` update set of one trial; Byzantine rows come last."""
        rng = np.random.default_rng([seed, trial])
        benign = self.g + self.sigma * rng.standard_normal((self.n - self.f, self.d))
        byz = [random_byzantine(self.d, self.byz_sigma, [seed, trial, k]) for k in range(self.f)]
        return np.vstack([benign, *byz]) if byz else benign


@dataclass
class ResilienceEstimate:
    trials: int
    mean_output: np.ndarray
    g_norm_sq: float
    inner_product: float
    inner_product_stderr: float
    alpha_hat: float | None
    alpha_hat_stderr: float | None
    alpha_bound: float
    alpha_bound_stderr: float
    moment_ratios: dict[int, float]
    moment_ratio_stderr: dict[int, float]
    block_alpha_hat: list[float | None] = field(default_factory=list)
    block_alpha_bound: list[float | None] = field(default_factory=list)
    block_inner_product: list[float] = field(default_factory=list)
    error: str | None = None

    @property
    def condition_i_holds(self) -> bool:
        """``<E F, g> >= (1 - sin alpha_hat) ||g||^2`` with ``alpha_hat < pi/2``."""
        if self.alpha_hat is None or not self.alpha_hat < math.pi / 2:
            return False
        return self.inner_product >= (1 - math.sin(self.alpha_hat)) * self.g_norm_sq

    def to_dict(self) -> dict:
        return {
            "trials": self.trials,
            "mean_output": self.mean_output.tolist(),
            "inner_product": self.inner_product,
            "inner_product_stderr": self.inner_product_stderr,
            "g_norm_sq": self.g_norm_sq,
            "alpha_hat": self.alpha_hat,
            "alpha_hat_stderr": self.alpha_hat_stderr,
            "alpha_bound": self.alpha_bound,
            "alpha_bound_stderr": self.alpha_bound_stderr,
            "condition_i_holds": self.condition_i_holds,
            "moment_ratios": {str(r): v for r, v in self.moment_ratios.items()},
            "moment_ratio_stderr": {str(r): v for r, v in self.moment_ratio_stderr.items()},
            "block_alpha_hat": self.block_alpha_hat,
            "block_alpha_bound": self.block_alpha_bound,
            "block_inner_product": self.block_inner_product,
            "error": self.error,
        }


def _stderr(x: np.ndarray) -> float:
    return float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0


def angle_stats(outputs: np.ndarray, g: np.ndarray) -> tuple[float | None, float | None]:
    """Angle between the mean of ``outputs`` and ``g``, with its stderr."""
    m = outputs.mean(axis=0)
    nm, ng = np.linalg.norm(m), np.linalg.norm(g)
    if nm == 0.0 or ng == 0.0:
        return None, None
    m_hat, g_hat = m / nm, g / ng
    c = float(np.clip(m_hat @ g_hat, -1.0, 1.0))
    alpha = math.acos(c)
    perp = g_hat - c * m_hat
    if np.linalg.norm(perp) > 1e-12:
        u = perp / np.linalg.norm(perp)
        return alpha, _stderr(outputs @ u) / nm
    # mean exactly along g: spread over every direction orthogonal to it
    resid = outputs - np.outer(outputs @ m_hat, m_hat)
    var = resid.var(axis=0, ddof=1).sum() if len(outputs) > 1 else 0.0
    return alpha, float(math.sqrt(var / len(outputs)) / nm)


def bound_angle(inner: float, inner_se: float, g_norm_sq: float) -> tuple[float, float]:
    """Smallest alpha meeting ``inner >= (1 - sin alpha) g_norm_sq``, with stderr."""
    x = min(1.0, max(0.0, 1.0 - inner / g_norm_sq))
    cos = math.sqrt(1.0 - x * x)
    se = inner_se / g_norm_sq / cos if cos > 0 else math.inf
    return math.asin(x), se


def collect_outputs(scenario: ResilienceScenario, spec: AggregatorSpec, p: LayerPartition | None, seed):
    """Aggregated outputs of every trial plus all benign norms."""
    outputs = np.empty((scenario.trials, scenario.d))
    benign_norms = np.empty((scenario.trials, scenario.n - scenario.f))
    for t in range(scenario.trials):
        X = scenario.draw(seed, t)
        outputs[t] = aggregate(spec, p, X).aggregate
        benign_norms[t] = np.linalg.norm(X[: scenario.n - scenario.f], axis=1)
    return outputs, benign_norms.reshape(-1)


def summarize_outputs(outputs, benign_norms, g, p: LayerPartition | None) -> ResilienceEstimate:
    T = outputs.shape[0]
    g_norm_sq = float(g @ g)
    inner_t = outputs @ g
    inner, inner_se = float(inner_t.mean()), _stderr(inner_t)
    alpha, alpha_se = angle_stats(outputs, g)
    a_bound, a_bound_se = bound_angle(inner, inner_se, g_norm_sq)

    out_norms = np.linalg.norm(outputs, axis=1)
    ratios, ratio_se = {}, {}
    for r in MOMENT_ORDERS:
        num, den = out_norms ** r, benign_norms ** r
        ratio = float(num.mean() / den.mean())
        rel = math.hypot(_stderr(num) / num.mean() if num.mean() else 0.0, _stderr(den) / den.mean())
        ratios[r], ratio_se[r] = ratio, ratio * rel

    block_alpha, block_bound, block_inner = [], [], []
    if p is not None and p.k > 1:
        for sl in p.slices():
            gj = g[sl]
            ij = float((outputs[:, sl] @ gj).mean())
            block_inner.append(ij)
            if not gj.any():
                block_alpha.append(None)
                block_bound.append(None)
                continue
            block_alpha.append(angle_stats(outputs[:, sl], gj)[0])
            block_bound.append(bound_angle(ij, 0.0, float(gj @ gj))[0])

    return ResilienceEstimate(
        trials=T,
        mean_output=outputs.mean(axis=0),
        g_norm_sq=g_norm_sq,
        inner_product=inner,
        inner_product_stderr=inner_se,
        alpha_hat=alpha,
        alpha_hat_stderr=alpha_se,
        alpha_bound=a_bound,
        alpha_bound_stderr=a_bound_se,
        moment_ratios=ratios,
        moment_ratio_stderr=ratio_se,
        block_alpha_hat=block_alpha,
        block_alpha_bound=block_bound,
        block_inner_product=block_inner,
        error=None if alpha is not None else "mean output is zero; alpha_hat undefined",
    )


def estimate(
    scenario: ResilienceScenario,
    spec: AggregatorSpec,
    p: LayerPartition | None = None,
    seed: int = 0,
) -> ResilienceEstimate:
    """Monte-Carlo resilience statistics of ``spec`` under ``scenario``.

    Per-block angles are filled in whenever ``p`` has more than one block.
    """
    spec.check_clients(scenario.n)
    outputs, benign_norms = collect_outputs(scenario, spec, p, seed)
    return summarize_outputs(outputs, benign_norms, scenario.g, p)


@dataclass
class LayerwiseCheck:
    passed: bool
    inner_product: float
    inner_product_stderr: float
    rhs: float
    alpha_max: float | None
    block_alpha_hat: list[float | None]
    estimate: ResilienceEstimate

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "inner_product": self.inner_product,
            "inner_product_stderr": self.inner_product_stderr,
            "rhs": self.rhs,
            "alpha_max": self.alpha_max,
            "block_alpha_hat": self.block_alpha_hat,
            "estimate": self.estimate.to_dict(),
        }


def layerwise_angle_check(
    scenario: ResilienceScenario,
    base: AggregatorSpec,
    p: LayerPartition,
    seed: int = 0,
    n_stderr: float = 3.0,
) -> LayerwiseCheck:
    """Compare ``<E F, g>`` of the layerwise rule with ``(1 - sin max_j alpha_j) ||g||^2``.

    ``alpha_j`` is the per-block ``alpha_hat``; blocks where ``g`` vanishes
    contribute zero to both sides and are skipped. With one block the
    maximum is the plain ``alpha_hat``.
    """
    spec = replace(base, layerwise=True)
    est = estimate(scenario, spec, p, seed)
    if p.k == 1:
        alphas = [est.alpha_hat]
    else:
        alphas = [a for a, gj in zip(est.block_alpha_hat, p.slices()) if scenario.g[gj].any()]
    if any(a is None for a in alphas) or not alphas:
        return LayerwiseCheck(False, est.inner_product, est.inner_product_stderr, math.nan, None, est.block_alpha_hat, est)
    alpha_max = max(alphas)
    rhs = (1 - math.sin(alpha_max)) * est.g_norm_sq
    passed = est.inner_product + n_stderr * est.inner_product_stderr >= rhs
    return LayerwiseCheck(passed, est.inner_product, est.inner_product_stderr, rhs, alpha_max, est.block_alpha_hat, est)
