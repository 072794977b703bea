"""Synchronous multi-round federated training with optional adversaries.

Each round samples ``clients_per_round`` clients without replacement,
collects their deltas ``V_i - V_G`` (adversaries may boost theirs), aggregates
the deltas and applies ``V_G <- V_G + eta * aggregate``. All randomness is
derived from ``config.seed`` through named streams, so a run is a pure
function of its config.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .aggregation import AggregationOutcome, AggregatorSpec, BaseRule, aggregate
from .attacks import AttackKind, AttackSpec, boost_update, flip_labels, random_byzantine
from .data import FederationPlan, blob_task, federate
from .learning import Dataset, ModelArch, OptimizerSpec, evaluate, init_params, train_local
from .params import LayerPartition

# stream tags for np.random.default_rng([seed, tag, ...])
_DATA, _SPLIT, _ROLES, _FLIP, _INIT, _SAMPLE, _TRAIN, _BYZ = range(8)


class SimulationError(RuntimeError):
    """A round could not be completed; the message names the round."""


@dataclass(frozen=True)
class TaskSpec:
    """Synthetic blob classification task shared by all clients."""

    num_classes: int = 4
    input_dim: int = 20
    per_class: int = 500
    test_per_class: int = 250
    spread: float = 3.0
    noise: float = 1.0


@dataclass(frozen=True)
class FederatedConfig:
    task: TaskSpec
    arch: ModelArch
    plan: FederationPlan
    opt: OptimizerSpec = OptimizerSpec()
    agg: AggregatorSpec = AggregatorSpec()
    attack: AttackSpec = AttackSpec()
    rounds: int = 30
    # 0 means round(participation * roster size)
    clients_per_round: int = 0
    participation: float = 0.5
    server_eta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.arch.input_dim != self.task.input_dim or self.arch.num_classes != self.task.num_classes:
            raise ValueError("model input_dim/num_classes must match the task")
        if self.rounds < 0:
            raise ValueError("rounds must be nonnegative")
        if self.clients_per_round < 0:
            raise ValueError("clients_per_round must be nonnegative")
        if not 0 < self.participation <= 1:
            raise ValueError("participation must lie in (0, 1]")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")
        if not self.server_eta > 0:
            raise ValueError("server_eta must be positive")

    def round_size(self, roster_size: int) -> int:
        n = self.clients_per_round or max(1, round(self.participation * roster_size))
        if n > roster_size:
            raise ValueError(f"clients_per_round={n} exceeds roster size {roster_size}")
        return n


@dataclass
class ClientState:
    id: int
    data: Dataset
    adversarial: bool = False


@dataclass
class RoundMetrics:
    round: int
    test_loss: float
    test_accuracy: float
    selected_indices: tuple[int, ...] = ()
    clip_threshold: float | None = None
    wallclock_ms: float | None = None
    # diagnostics below are not part of the CSV stream
    sampled: tuple[int, ...] = ()
    adversaries: tuple[int, ...] = ()
    block_selections: tuple[tuple[int, ...], ...] = ()
    update_norm: float = 0.0
    benign_median_norm: float | None = None


@dataclass(frozen=True)
class RunSummary:
    final_loss: float
    avg_last10_loss: float
    min_loss: float
    avg_last10_accuracy: float
    max_accuracy: float

    def to_dict(self) -> dict[str, float]:
        return {
            "final_loss": self.final_loss,
            "avg_last10_loss": self.avg_last10_loss,
            "min_loss": self.min_loss,
            "avg_last10_accuracy": self.avg_last10_accuracy,
            "max_accuracy": self.max_accuracy,
        }


@dataclass
class RunResult:
    metrics: list[RoundMetrics]
    summary: RunSummary
    initial_loss: float
    initial_accuracy: float
    roster: list[ClientState] = field(repr=False, default_factory=list)
    final_params: np.ndarray | None = field(repr=False, default=None)


def summarize(metrics: Sequence[RoundMetrics]) -> RunSummary:
    if not metrics:
        raise ValueError("cannot summarize an empty metric sequence")
    losses = [m.test_loss for m in metrics]
    accs = [m.test_accuracy for m in metrics]
    tail = slice(-10, None)
    return RunSummary(
        final_loss=losses[-1],
        avg_last10_loss=float(np.mean(losses[tail])),
        min_loss=min(losses),
        avg_last10_accuracy=float(np.mean(accs[tail])),
        max_accuracy=max(accs),
    )


def server_step(
    params: np.ndarray,
    deltas,
    spec: AggregatorSpec,
    partition: LayerPartition | None,
    eta: float = 1.0,
) -> tuple[np.ndarray, AggregationOutcome]:
    """Aggregate client deltas and apply them to the global parameters."""
    out = aggregate(spec, partition, deltas)
    return params + eta * out.aggregate, out


def build_roster(config: FederatedConfig) -> tuple[list[ClientState], Dataset]:
    """Client shards, the fixed adversary set and the held-out test set."""
    t = config.task
    train, test = blob_task(
        t.num_classes, t.input_dim, t.per_class, t.test_per_class, t.spread, [config.seed, _DATA], t.noise
    )
    shards = federate(train, config.plan, [config.seed, _SPLIT])
    attack = config.attack
    n_adv = round(attack.byzantine_fraction * len(shards)) if attack.kind is not AttackKind.NONE else 0
    rng = np.random.default_rng([config.seed, _ROLES])
    adversaries = set(rng.choice(len(shards), size=n_adv, replace=False).tolist())
    roster = []
    for cid, shard in enumerate(shards):
        bad = cid in adversaries
        if bad and attack.kind is AttackKind.LABEL_FLIP:
            shard = flip_labels(shard, attack.fraction, t.num_classes, [config.seed, _FLIP, cid])
        roster.append(ClientState(cid, shard, bad))
    return roster, test


UpdateFn = Callable[[ClientState, np.ndarray, int], np.ndarray]


def client_delta(config: FederatedConfig, client: ClientState, params: np.ndarray, rnd: int, n: int) -> np.ndarray:
    """The delta a client transmits in round ``rnd`` of ``n`` participants."""
    attack = config.attack
    if client.adversarial and attack.kind is AttackKind.RANDOM_GAUSSIAN:
        delta = random_byzantine(params.size, attack.sigma, [config.seed, _BYZ, rnd, client.id])
        local = params + delta
    else:
        local = train_local(config.arch, params, client.data, config.opt, [config.seed, _TRAIN, rnd, client.id])
    if client.adversarial and attack.boost:
        return boost_update(local, params, n, config.server_eta)
    return local - params


def run(
    config: FederatedConfig,
    timing: bool = False,
    on_round: Callable[[RoundMetrics], None] | None = None,
    update_fn: UpdateFn | None = None,
) -> RunResult:
    """Train for ``config.rounds`` rounds and evaluate after each one.

    ``update_fn(client, params, round)`` replaces :func:`client_delta` when
    given; tests use it to force specific deltas.
    """
    roster, test = build_roster(config)
    n = config.round_size(len(roster))
    arch = config.arch
    partition = arch.partition
    params = init_params(arch, [config.seed, _INIT])
    init_loss, init_acc = evaluate(arch, params, test)
    sampler = np.random.default_rng([config.seed, _SAMPLE])
    metrics: list[RoundMetrics] = []

    for rnd in range(1, config.rounds + 1):
        start = time.perf_counter()
        sampled = np.sort(sampler.choice(len(roster), size=n, replace=False))
        clients = [roster[i] for i in sampled]
        if update_fn is None:
            deltas = np.stack([client_delta(config, c, params, rnd, n) for c in clients])
        else:
            deltas = np.stack([np.asarray(update_fn(c, params, rnd), dtype=np.float64) for c in clients])
        try:
            params, out = server_step(params, deltas, config.agg, partition, config.server_eta)
        except (ValueError, ArithmeticError) as exc:
            raise SimulationError(f"round {rnd}: aggregation failed: {exc}") from exc
        loss, acc = evaluate(arch, params, test)

        ids = [c.id for c in clients]
        benign = [np.linalg.norm(d) for d, c in zip(deltas, clients) if not c.adversarial]
        m = RoundMetrics(
            round=rnd,
            test_loss=loss,
            test_accuracy=acc,
            selected_indices=tuple(ids[i] for i in out.selected_indices),
            clip_threshold=out.diagnostics.get("clip_threshold"),
            wallclock_ms=(time.perf_counter() - start) * 1e3 if timing else None,
            sampled=tuple(ids),
            adversaries=tuple(c.id for c in clients if c.adversarial),
            block_selections=tuple(tuple(ids[i] for i in blk) for blk in out.block_selections),
            update_norm=float(np.linalg.norm(out.aggregate)),
            benign_median_norm=float(np.median(benign)) if benign else None,
        )
        metrics.append(m)
        if on_round is not None:
            on_round(m)

    if metrics:
        summary = summarize(metrics)
    else:
        summary = RunSummary(init_loss, init_loss, init_loss, init_acc, init_acc)
    return RunResult(metrics, summary, init_loss, init_acc, roster, params)


