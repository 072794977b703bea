"""Experiment files: an INI dialect mapped one-to-one onto the config dataclasses.

A file with a ``[resilience]`` section describes a Monte-Carlo resilience
experiment; any other file describes a federated simulation. Unknown
sections or keys are errors. :data:`SCHEMA` lists every key with its type
and default; :func:`schema_reference` renders it.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import re
from dataclasses import dataclass, field
from typing import Any, Callable

from .aggregation import VARIANTS, AggregatorSpec, BaseRule, ClipMode, ClipScope
from .attacks import AttackKind, AttackSpec
from .data import FederationPlan, Scheme
from .learning import ModelArch, ModelKind, OptimizerKind, OptimizerSpec
from .params import DistanceMetric
from .resilience import GDirection, ResilienceScenario
from .simulator import FederatedConfig, TaskSpec


class ConfigError(ValueError):
    def __init__(self, message: str, source: str = "<config>", line: int | None = None):
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")
        self.source, self.line = source, line


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


_bool.__name__ = "bool"


def _choice(enum_cls) -> Callable[[str], str]:
    values = [e.value for e in enum_cls]

    def parse(text: str) -> str:
        if text not in values:
            raise ValueError(f"expected one of {values}, got {text!r}")
        return text

    parse.__name__ = "|".join(values)
    return parse


def _variant(text: str) -> str:
    if text not in VARIANTS:
        raise ValueError(f"expected one of {sorted(VARIANTS)}, got {text!r}")
    return text


_variant.__name__ = "|".join(VARIANTS)

# section -> key -> (parser, default, help)
SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], Any, str]]] = {
    "task": {
        "num_classes": (int, 4, "number of blob classes"),
        "input_dim": (int, 20, "feature dimension"),
        "per_class": (int, 500, "training examples per class"),
        "test_per_class": (int, 250, "held-out test examples per class"),
        "spread": (float, 3.0, "norm of every class center"),
        "noise": (float, 1.0, "within-class standard deviation"),
    },
    "model": {
        "kind": (_choice(ModelKind), "mlp1", "softmax or one-hidden-layer ReLU MLP"),
        "hidden_dim": (int, 100, "hidden width (mlp1 only)"),
    },
    "federation": {
        "num_clients": (int, 40, "clients before exclusion"),
        "scheme": (_choice(Scheme), "iid", "iid or label-dirichlet partition"),
        "alpha": (float, 1.0, "Dirichlet concentration"),
        "min_samples": (int, 30, "dirichlet: drop clients with fewer examples"),
    },
    "optimizer": {
        "kind": (_choice(OptimizerKind), "adam", "local optimiser"),
        "learning_rate": (float, 0.001, "local learning rate"),
        "epochs": (int, 10, "local epochs per round"),
        "batch_size": (int, 32, "local mini-batch size"),
        "beta1": (float, 0.9, "Adam beta1"),
        "beta2": (float, 0.999, "Adam beta2"),
        "epsilon": (float, 1e-8, "Adam epsilon"),
    },
    "aggregator": {
        "base": (_choice(BaseRule), "fedavg", "base operator"),
        "variant": (_variant, None, "shorthand for metric/clip/layerwise"),
        "metric": (_choice(DistanceMetric), "sq_euclidean", "distance used for ranking"),
        "clip": (_choice(ClipMode), "none", "median clipping (required by cosine)"),
        "layerwise": (_bool, False, "aggregate every layer separately"),
        "f": (int, None, "expected Byzantine count (resilience: defaults to scenario f, else 0)"),
        "bulyan_m": (int, 5, "Bulyan selection-set size"),
        "bulyan_trim": (_bool, False, "Bulyan coordinate-wise trimmed mean"),
        "clip_scope": (_choice(ClipScope), "block", "layerwise clipping per block or global"),
    },
    "attack": {
        "kind": (_choice(AttackKind), "none", "adversary behaviour"),
        "fraction": (float, 1.0, "share of an adversary's labels resampled"),
        "sigma": (float, 1.0, "random_gaussian entry scale"),
        "boost": (_bool, False, "scale adversarial deltas by n / eta"),
        "byzantine_fraction": (float, 0.2, "share of the roster that is adversarial (inert when kind = none)"),
    },
    "run": {
        "rounds": (int, 30, "communication rounds"),
        "clients_per_round": (int, 0, "participants per round; 0 = participation * roster"),
        "participation": (float, 0.5, "used when clients_per_round = 0"),
        "server_eta": (float, 1.0, "server learning rate"),
        "seed": (int, 0, "master seed"),
    },
    "resilience": {
        "n": (int, 25, "updates per trial"),
        "f": (int, 5, "Byzantine updates per trial"),
        "d": (int, 8, "dimension"),
        "sigma": (float, 0.5, "benign noise standard deviation"),
        "trials": (int, 2000, "Monte-Carlo trials"),
        "g_norm": (float, 1.0, "norm of the true gradient"),
        "g_direction": (_choice(GDirection), "first", "g along e_1 or uniform"),
        "byz_sigma": (float, 10.0, "Byzantine entry scale"),
        "blocks": (int, 1, "equal layer blocks for layerwise rules"),
        "seed": (int, 0, "master seed"),
    },
    "output": {
        "metrics": (str, "metrics.csv", "per-round CSV file name"),
        "summary": (str, "summary.json", "run summary JSON file name"),
        "report": (str, "report.json", "resilience report JSON file name"),
    },
}

SIMULATE_SECTIONS = ("task", "model", "federation", "optimizer", "aggregator", "attack", "run", "output")
RESILIENCE_SECTIONS = ("resilience", "aggregator", "output")


@dataclass(frozen=True)
class OutputPaths:
    metrics: str = "metrics.csv"
    summary: str = "summary.json"
    report: str = "report.json"


@dataclass(frozen=True)
class ResilienceExperiment:
    scenario: ResilienceScenario
    agg: AggregatorSpec
    blocks: int = 1
    seed: int = 0


@dataclass(frozen=True)
class ExperimentFile:
    kind: str
    simulation: FederatedConfig | None = None
    resilience: ResilienceExperiment | None = None
    output: OutputPaths = field(default_factory=OutputPaths)

    @property
    def seed(self) -> int:
        return self.simulation.seed if self.simulation else self.resilience.seed


def schema_reference() -> str:
    rows = [(s, k, p.__name__, repr(d), h) for s, keys in SCHEMA.items() for k, (p, d, h) in keys.items()]
    wk, wt, wd = (max(len(r[i]) for r in rows) for i in (1, 2, 3))
    lines, section = [], None
    for s, key, kind, default, help_ in rows:
        if s != section:
            lines.append(f"[{s}]")
            section = s
        lines.append(f"  {key:<{wk}}  {kind:<{wt}}  {default:<{wd}}  {help_}")
    return "\n".join(lines)


def _line_numbers(text: str) -> dict[tuple[str, str], int]:
    where, section = {}, None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.match(r"\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            where[(section, "")] = no
            continue
        key = re.split(r"[=:]", line, maxsplit=1)[0].strip().lower()
        if section is not None:
            where[(section, key)] = no
    return where


def read_raw(text: str, source: str = "<config>") -> tuple[dict[str, dict[str, str]], dict]:
    parser = configparser.ConfigParser(interpolation=None, strict=True, default_section="__none__")
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(str(exc).splitlines()[0], source, line) from None
    lines = _line_numbers(text)
    raw: dict[str, dict[str, str]] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", source, lines.get((section, "")))
        raw[section] = {}
        for key, value in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]", source, lines.get((section, key)))
            raw[section][key] = value
    return raw, lines


def apply_overrides(raw: dict[str, dict[str, str]], overrides) -> None:
    """Apply ``key=value`` strings; ``key`` may be ``section.key`` or unambiguous."""
    kind_sections = RESILIENCE_SECTIONS if "resilience" in raw else SIMULATE_SECTIONS
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value", "--set")
        key, value = (s.strip() for s in item.split("=", 1))
        if "." in key:
            section, key = key.split(".", 1)
            if section not in SCHEMA or key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}", "--set")
        else:
            matches = [s for s in kind_sections if key in SCHEMA[s]]
            if not matches:
                raise ConfigError(f"unknown key {key!r}", "--set")
            if len(matches) > 1:
                raise ConfigError(f"ambiguous key {key!r}; use one of {[f'{s}.{key}' for s in matches]}", "--set")
            section = matches[0]
        raw.setdefault(section, {})[key] = value


def _values(raw, lines, source, section) -> dict[str, Any]:
    out = {}
    given = raw.get(section, {})
    for key, (parser, default, _) in SCHEMA[section].items():
        if key in given:
            try:
                out[key] = parser(given[key].strip())
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}", source, lines.get((section, key))) from None
        else:
            out[key] = default
    return out


def _agg_spec(v: dict, default_f: int) -> AggregatorSpec:
    f = v["f"] if v["f"] is not None else default_f
    common = dict(f=f, bulyan_m=v["bulyan_m"], bulyan_trim=v["bulyan_trim"], clip_scope=v["clip_scope"])
    if v["variant"] is not None:
        return AggregatorSpec.from_variant(v["base"], v["variant"], **common)
    return AggregatorSpec(v["base"], v["metric"], v["clip"], v["layerwise"], **common)


def build(raw, lines=None, source: str = "<config>") -> ExperimentFile:
    lines = lines or {}
    if "variant" in raw.get("aggregator", {}):
        clash = {"metric", "clip", "layerwise"} & raw["aggregator"].keys()
        if clash:
            raise ConfigError(
                f"[aggregator] variant cannot be combined with {sorted(clash)}",
                source,
                lines.get(("aggregator", "variant")),
            )
    v = {s: _values(raw, lines, source, s) for s in SCHEMA}
    anchor = lambda s: lines.get((s, ""))  # noqa: E731
    out = OutputPaths(**v["output"])
    try:
        if "resilience" in raw:
            extra = set(raw) - set(RESILIENCE_SECTIONS)
            if extra:
                raise ConfigError(f"sections {sorted(extra)} do not apply to a resilience experiment", source)
            r = v["resilience"]
            scenario = ResilienceScenario(
                n=r["n"], f=r["f"], d=r["d"], sigma=r["sigma"], trials=r["trials"],
                g_norm=r["g_norm"], g_direction=r["g_direction"], byz_sigma=r["byz_sigma"],
            )
            if r["blocks"] < 1 or r["d"] % r["blocks"]:
                raise ValueError(f"blocks={r['blocks']} must divide d={r['d']}")
            exp = ResilienceExperiment(scenario, _agg_spec(v["aggregator"], r["f"]), r["blocks"], r["seed"])
            return ExperimentFile("resilience", resilience=exp, output=out)

        t, m, fe, o, a, r = (v[s] for s in ("task", "model", "federation", "optimizer", "attack", "run"))
        config = FederatedConfig(
            task=TaskSpec(**t),
            arch=ModelArch(m["kind"], t["input_dim"], t["num_classes"], m["hidden_dim"] if m["kind"] == "mlp1" else 0),
            plan=FederationPlan(fe["num_clients"], fe["scheme"], fe["alpha"], fe["min_samples"]),
            opt=OptimizerSpec(o["kind"], o["learning_rate"], o["epochs"], o["batch_size"], o["beta1"], o["beta2"], o["epsilon"]),
            agg=_agg_spec(v["aggregator"], 0),
            attack=AttackSpec(a["kind"], a["fraction"], a["sigma"], a["boost"], a["byzantine_fraction"]),
            rounds=r["rounds"],
            clients_per_round=r["clients_per_round"],
            participation=r["participation"],
            server_eta=r["server_eta"],
            seed=r["seed"],
        )
        return ExperimentFile("simulate", simulation=config, output=out)
    except ConfigError:
        raise
    except ValueError as exc:
        section = "resilience" if "resilience" in raw else None
        raise ConfigError(str(exc), source, anchor(section) if section else None) from None


def loads(text: str, overrides=None, source: str = "<config>") -> ExperimentFile:
    raw, lines = read_raw(text, source)
    apply_overrides(raw, overrides)
    return build(raw, lines, source)


def load(path, overrides=None) -> ExperimentFile:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    return loads(text, overrides, str(path))


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if hasattr(value, "value"):
        return str(value.value)
    return str(value)


def to_raw(exp: ExperimentFile) -> dict[str, dict[str, str]]:
    """Every key of the experiment, explicit, as strings."""
    out = exp.output
    sections: dict[str, dict[str, Any]] = {}
    if exp.kind == "resilience":
        r = exp.resilience
        s = r.scenario
        sections["resilience"] = dict(
            n=s.n, f=s.f, d=s.d, sigma=s.sigma, trials=s.trials, g_norm=s.g_norm,
            g_direction=s.g_direction, byz_sigma=s.byz_sigma, blocks=r.blocks, seed=r.seed,
        )
        agg = r.agg
    else:
        c = exp.simulation
        sections["task"] = vars(c.task).copy()
        sections["model"] = dict(kind=c.arch.kind, hidden_dim=c.arch.hidden_dim or SCHEMA["model"]["hidden_dim"][1])
        sections["federation"] = dict(
            num_clients=c.plan.num_clients, scheme=c.plan.scheme, alpha=c.plan.alpha,
            min_samples=c.plan.min_samples_per_client,
        )
        o = c.opt
        sections["optimizer"] = dict(
            kind=o.kind, learning_rate=o.learning_rate, epochs=o.epochs_per_round, batch_size=o.batch_size,
            beta1=o.adam_beta1, beta2=o.adam_beta2, epsilon=o.adam_epsilon,
        )
        sections["attack"] = vars(c.attack).copy()
        sections["run"] = dict(
            rounds=c.rounds, clients_per_round=c.clients_per_round, participation=c.participation,
            server_eta=c.server_eta, seed=c.seed,
        )
        agg = c.agg
    sections["aggregator"] = dict(
        base=agg.base, metric=agg.metric, clip=agg.clip, layerwise=agg.layerwise, f=agg.f,
        bulyan_m=agg.bulyan_m, bulyan_trim=agg.bulyan_trim, clip_scope=agg.clip_scope,
    )
    sections["output"] = dict(metrics=out.metrics, summary=out.summary, report=out.report)
    order = [s for s in SCHEMA if s in sections]
    return {s: {k: _fmt(v) for k, v in sections[s].items()} for s in order}


def dumps(exp: ExperimentFile) -> str:
    buf = io.StringIO()
    for section, items in to_raw(exp).items():
        buf.write(f"[{section}]\n")
        for key, value in items.items():
            buf.write(f"{key} = {value}\n")
        buf.write("\n")
    return buf.getvalue()


def config_hash(exp: ExperimentFile) -> str:
    """Digest of every setting except output file names."""
    raw = to_raw(exp)
    raw.pop("output", None)
    canon = "\n".join(f"{s}.{k}={v}" for s, items in raw.items() for k, v in items.items())
    return hashlib.sha256(canon.encode()).hexdigest()
