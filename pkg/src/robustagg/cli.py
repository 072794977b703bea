"""``robustagg`` command line: simulate, resilience and sweep.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import contextlib
import copy
import csv
import io
import itertools
import json
import math
import os
import sys
import tempfile
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import config as cfg
from .aggregation import VARIANTS
from .params import LayerPartition
from .resilience import estimate, layerwise_angle_check
from .simulator import SimulationError, run

CSV_COLUMNS = ("round", "test_loss", "test_accuracy", "selected_indices", "clip_threshold", "wallclock_ms")
SWEEP_AXES = ("operator", "variant", "byzantine_fraction", "d", "seed")
DEFAULT_OPERATORS = ("krum", "bulyan", "geomed")
DEFAULT_SEED_COUNT = 5

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class UsageError(ValueError):
    pass


@contextlib.contextmanager
def atomic_open(path):
    """A text handle on a temp file next to ``path``, renamed into place on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write(path, text: str) -> None:
    with atomic_open(path) as fh:
        fh.write(text)


def _finite(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def dump_json(obj) -> str:
    return json.dumps(_finite(obj), indent=2) + "\n"


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def csv_row(m) -> list[str]:
    return [
        str(m.round),
        _cell(m.test_loss),
        _cell(m.test_accuracy),
        ";".join(str(i) for i in m.selected_indices),
        _cell(m.clip_threshold),
        _cell(m.wallclock_ms),
    ]


def metrics_csv(metrics) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    w.writerows(csv_row(m) for m in metrics)
    return buf.getvalue()


def _experiment_raw(path, overrides, seed):
    """Raw sections of a config file after ``--set`` and ``--seed``."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise cfg.ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    raw, lines = cfg.read_raw(text, str(path))
    cfg.apply_overrides(raw, overrides)
    if seed is not None:
        section = "resilience" if "resilience" in raw else "run"
        raw.setdefault(section, {})["seed"] = str(seed)
    return raw, lines


def execute(exp: cfg.ExperimentFile, out_dir: Path, timing: bool = False) -> dict:
    """Run one experiment, write its files into ``out_dir`` and return its summary."""
    digest = cfg.config_hash(exp)
    if exp.kind == "simulate":
        # rows stream into the temp file as rounds finish; the rename happens at the end
        with atomic_open(out_dir / exp.output.metrics) as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)

            def emit(m):
                w.writerow(csv_row(m))
                fh.flush()

            result = run(exp.simulation, timing=timing, on_round=emit)
        summary = {**result.summary.to_dict(), "config_hash": digest}
        atomic_write(out_dir / exp.output.summary, dump_json(summary))
        return summary

    r = exp.resilience
    partition = LayerPartition.equal(r.scenario.d, r.blocks) if r.blocks > 1 else None
    est = estimate(r.scenario, r.agg, partition, r.seed)
    report = {"config_hash": digest, **est.to_dict()}
    if r.agg.layerwise and partition is not None:
        check = layerwise_angle_check(r.scenario, r.agg, partition, r.seed)
        report["layerwise_check"] = {k: v for k, v in check.to_dict().items() if k != "estimate"}
    atomic_write(out_dir / exp.output.report, dump_json(report))
    return {k: report[k] for k in ("config_hash", "alpha_hat", "alpha_hat_stderr", "alpha_bound",
                                   "alpha_bound_stderr", "inner_product", "condition_i_holds")}


def _validate_simulation(exp: cfg.ExperimentFile, source: str) -> None:
    """Reject operator/round-size mismatches before any training starts."""
    c = exp.simulation
    if c.plan.scheme.value != "iid":
        return  # the roster size is only known after the dirichlet split
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            c.agg.check_clients(c.round_size(c.plan.num_clients))
        except ValueError as exc:
            raise cfg.ConfigError(str(exc), source) from None


def cmd_single(args, kind: str) -> int:
    raw, lines = _experiment_raw(args.config, args.set, args.seed)
    exp = cfg.build(raw, lines, str(args.config))
    if exp.kind != kind:
        raise UsageError(f"{args.config} describes a {exp.kind} experiment, not {kind}")
    if kind == "simulate":
        _validate_simulation(exp, str(args.config))
    else:
        try:
            exp.resilience.agg.check_clients(exp.resilience.scenario.n)
        except ValueError as exc:
            raise cfg.ConfigError(str(exc), str(args.config)) from None
    out = Path(args.out)
    summary = execute(exp, out, timing=getattr(args, "timing", False))
    print(json.dumps(_finite(summary)))
    return EXIT_OK


def parse_axis(text: str, raw: dict) -> tuple[str, list[str]]:
    name, _, values = text.partition("=")
    name = name.strip()
    if name not in SWEEP_AXES:
        raise UsageError(f"unknown sweep axis {name!r}; choose from {list(SWEEP_AXES)}")
    values = values.strip()
    if not values:
        if name == "operator":
            return name, list(DEFAULT_OPERATORS)
        if name == "variant":
            return name, list(VARIANTS)
        if name == "seed":
            section = "resilience" if "resilience" in raw else "run"
            try:
                base = int(raw.get(section, {}).get("seed", 0))
            except ValueError:
                raise UsageError("seed must be an integer") from None
            return name, [str(base + i) for i in range(DEFAULT_SEED_COUNT)]
        raise UsageError(f"sweep axis {name!r} needs explicit values, e.g. {name}=a,b")
    if name == "seed" and ".." in values:
        try:
            lo, hi = (int(s) for s in values.split(".."))
        except ValueError:
            raise UsageError(f"seed range must look like a..b, got {values!r}") from None
        if hi < lo:
            raise UsageError(f"empty seed range {values}")
        return name, [str(s) for s in range(lo, hi + 1)]
    items = [v.strip() for v in values.split(",") if v.strip()]
    if len(set(items)) != len(items):
        raise UsageError(f"duplicate values on sweep axis {name!r}")
    return name, items


def _apply_axis(raw: dict, name: str, value: str) -> None:
    resilience = "resilience" in raw
    if name == "operator":
        raw.setdefault("aggregator", {})["base"] = value
    elif name == "variant":
        agg = raw.setdefault("aggregator", {})
        for key in ("metric", "clip", "layerwise"):
            agg.pop(key, None)
        agg["variant"] = value
    elif name == "byzantine_fraction":
        if resilience:
            raise UsageError("byzantine_fraction does not apply to a resilience experiment")
        raw.setdefault("attack", {})["byzantine_fraction"] = value
    elif name == "d":
        section, key = ("resilience", "d") if resilience else ("task", "input_dim")
        raw.setdefault(section, {})[key] = value
    elif name == "seed":
        raw.setdefault("resilience" if resilience else "run", {})["seed"] = value


def _run_cell(payload):
    """Worker entry point; returns ``(summary, error)``."""
    raw, cell_dir, timing = payload
    exp = cfg.build(raw)
    try:
        return execute(exp, Path(cell_dir), timing), None
    except (SimulationError, ValueError, ArithmeticError) as exc:
        return None, str(exc)


def cmd_sweep(args) -> int:
    raw, lines = _experiment_raw(args.config, args.set, args.seed)
    axes = [parse_axis(a, raw) for a in (args.axis or ["variant"])]
    names = [n for n, _ in axes]
    if len(set(names)) != len(names):
        raise UsageError("each sweep axis may appear once")

    cells = []
    for combo in itertools.product(*(vals for _, vals in axes)):
        cell_raw = copy.deepcopy(raw)
        for name, value in zip(names, combo):
            _apply_axis(cell_raw, name, value)
        exp = cfg.build(cell_raw, lines, str(args.config))
        if exp.kind == "simulate":
            _validate_simulation(exp, str(args.config))
        label = "__".join(f"{n}={v}" for n, v in zip(names, combo))
        cells.append((label, dict(zip(names, combo)), cell_raw))

    out = Path(args.out)
    payloads = [(r, str(out / label), args.timing) for label, _, r in cells]
    if args.jobs > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_cell, payloads))
    else:
        results = [_run_cell(p) for p in payloads]

    index, failed = [], False
    for (label, params, cell_raw), (summary, error) in zip(cells, results):
        exp = cfg.build(cell_raw)
        files = [exp.output.report] if exp.kind == "resilience" else [exp.output.metrics, exp.output.summary]
        entry = {"cell": label, "params": params, "files": [f"{label}/{f}" for f in files], "summary": summary}
        if error is not None:
            entry["error"] = error
            failed = True
            print(f"cell {label}: {error}", file=sys.stderr)
        index.append(entry)
    atomic_write(out / "index.json", dump_json({"axes": names, "cells": index}))
    print(f"{len(index)} cells written to {out}")
    return EXIT_RUNTIME if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robustagg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment INI file")
        p.add_argument("--out", default=".", help="output directory (default: current)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key; KEY is section.key or an unambiguous key")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--timing", action="store_true", help="record per-round wallclock_ms")

    common(sub.add_parser("simulate", help="run one federated simulation"))
    common(sub.add_parser("resilience", help="Monte-Carlo resilience estimate"))
    sw = sub.add_parser("sweep", help="run a grid of experiments")
    common(sw)
    sw.add_argument("--axis", action="append", metavar="NAME[=VALUES]",
                    help=f"sweep axis, one of {', '.join(SWEEP_AXES)}; repeat for a cross-product")
    sw.add_argument("--jobs", type=int, default=1, help="concurrent cells")
    sub.add_parser("schema", help="print every config key with its default")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        if args.command == "schema":
            print(cfg.schema_reference())
            return EXIT_OK
        if args.command == "sweep":
            if args.jobs < 1:
                raise UsageError("--jobs must be at least 1")
            return cmd_sweep(args)
        return cmd_single(args, args.command)
    except (cfg.ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationError, ValueError, ArithmeticError) as exc:
        # configs are fully validated before running, so what remains is runtime
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
