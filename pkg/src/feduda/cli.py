"""Command-line front end.

Every subcommand reads an optional JSON config (``--config``); any
``ExperimentSpec`` field can be overridden with a flag of the same name.
Datasets are regenerated deterministically from the benchmark name and seed,
so no stage depends on files from an earlier invocation unless asked to
(``--checkpoint``).

Exit status: 0 on success, 2 for configuration or usage errors, 3 for
failures during a run.  ``FEDUDA_OUTPUT_DIR`` overrides the output directory.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .clustering import Partition, save_metrics, save_partition
from .evaluation import evaluate, roc_points, write_roc_csv
from .federation import write_traces_csv
from .model import ModelParams, load_checkpoint, save_checkpoint
from .pipeline import (
    METHODS,
    SWEEP_AXES,
    ExperimentSpec,
    build_benchmark,
    pretrain,
    pseudo_label_stage,
    run_methods,
    sweep,
)
from .synth import save_dataset

EXIT_CONFIG = 2
EXIT_RUNTIME = 3
OUTPUT_ENV = "FEDUDA_OUTPUT_DIR"
SPEC_FIELDS = {f.name: f for f in fields(ExperimentSpec)}
# keys a config file may carry besides the ExperimentSpec fields
EXTRA_KEYS = {"seeds", "methods", "output_dir"}


class ConfigError(Exception):
    pass


# -- configuration -------------------------------------------------------------

def _parse_hidden(value):
    if isinstance(value, (list, tuple)):
        return tuple(int(v) for v in value)
    text = str(value).strip()
    return tuple(int(v) for v in text.split(",")) if text else ()


def _parse_int_list(value):
    if isinstance(value, (list, tuple)):
        return [int(v) for v in value]
    return [int(v) for v in str(value).split(",") if v.strip()]


def _coerce(name, value):
    if name == "hidden":
        return _parse_hidden(value)
    default = SPEC_FIELDS[name].default
    if isinstance(default, bool):
        return bool(value)
    if isinstance(default, int):
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{name} must be an integer, got {value}")
        return int(value)
    if isinstance(default, float):
        return float(value)
    return str(value)


def load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})")
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(raw) - set(SPEC_FIELDS) - EXTRA_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    return raw


def resolve(args) -> dict:
    """Merge benchmark defaults, config file and flags, in that order."""
    raw = load_config(args.config) if args.config else {}
    flags = {k: getattr(args, k) for k in SPEC_FIELDS if getattr(args, k, None) is not None}
    merged = {**raw, **flags}
    benchmark = merged.pop("benchmark", "toy-L")
    seeds = _parse_int_list(args.seeds) if args.seeds is not None else _parse_int_list(raw.get("seeds", [0]))
    if not seeds:
        raise ConfigError("seeds must not be empty")
    methods = merged.pop("methods", None)
    if args.methods is not None:
        methods = [m for m in args.methods.split(",") if m]
    # flag, then environment, then config file
    out = args.out or os.environ.get(OUTPUT_ENV) or raw.get("output_dir") or "results"
    for key in EXTRA_KEYS:
        merged.pop(key, None)
    merged.pop("seed", None)
    try:
        spec_kw = {k: _coerce(k, v) for k, v in merged.items()}
        spec = ExperimentSpec.for_benchmark(benchmark, **spec_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc))
    methods = list(methods) if methods else [spec.method]
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown methods {bad}; choose from {list(METHODS)}")
    return {"spec": spec, "seeds": seeds, "methods": methods, "out": Path(out)}


def _resolved_record(cfg) -> dict:
    rec = cfg["spec"].as_record()
    rec.pop("seed")
    rec.update(seeds=cfg["seeds"], methods=cfg["methods"], output_dir=str(cfg["out"]), version=__version__)
    return rec


# -- output helpers -------------------------------------------------------------

def _prepare(cfg) -> Path:
    out = cfg["out"]
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(_resolved_record(cfg), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise RuntimeError(f"cannot write to output directory {out}: {exc}")
    return out


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out: Path) -> Path:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    entries = {str(p.relative_to(out)): {"sha256": sha256(p), "bytes": p.stat().st_size} for p in files}
    path = out / "manifest.json"
    path.write_text(json.dumps({"version": __version__, "files": entries}, indent=2, sort_keys=True) + "\n")
    return path


def _write_rows(path, rows):
    keys = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in keys})


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def aligned_table(rows, keys) -> str:
    cells = [[str(k) for k in keys]] + [[_short(r.get(k, "")) for k in keys] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(keys))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells) + "\n"


def _short(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.4f}"
    return str(v)


def _write_split(out: Path, name: str, split) -> None:
    save_dataset(out / f"{name}_eval.txt", split.dataset)
    with open(out / f"{name}_pairs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "genuine"])
        w.writerows([int(i), int(j), int(g)] for (i, j), g in zip(split.pairs, split.genuine))
    (out / f"{name}_query_gallery.json").write_text(json.dumps(
        {"query": split.query_idx.tolist(), "gallery": split.gallery_idx.tolist()}) + "\n")


# -- subcommands -----------------------------------------------------------------

def cmd_generate(cfg) -> int:
    out = _prepare(cfg)
    spec = cfg["spec"]
    for seed in cfg["seeds"]:
        d = out / "data" / f"seed-{seed}"
        d.mkdir(parents=True, exist_ok=True)
        data = build_benchmark(spec.benchmark, spec.K, seed)
        save_dataset(d / "source_train.txt", data.source_train)
        _write_split(d, "source", data.source_eval)
        _write_split(d, "target", data.target_eval)
        for c in data.target_clients:
            # ground truth is stored for evaluation only; training reads features
            save_dataset(d / f"{c.name}.txt", c.labeled("generate"))
    write_manifest(out)
    return 0


def _pretrained(spec, data, checkpoint):
    if checkpoint:
        model = load_checkpoint(checkpoint)
        if not isinstance(model, ModelParams):
            raise RuntimeError(f"{checkpoint} holds only a backbone; a full model is needed here")
        return model
    return pretrain(data.source_train, spec)


def cmd_pretrain(cfg) -> int:
    out = _prepare(cfg)
    rows = []
    for seed in cfg["seeds"]:
        spec = replace(cfg["spec"], seed=seed)
        data = build_benchmark(spec.benchmark, spec.K, seed)
        model = pretrain(data.source_train, spec)
        save_checkpoint(out / f"pretrain-seed{seed}.ckpt", model)
        s, t = evaluate(model.backbone, data.source_eval), evaluate(model.backbone, data.target_eval)
        rows.append({"seed": seed, **s.as_record("source_"), **t.as_record("target_")})
    _write_rows(out / "pretrain_metrics.csv", rows)
    write_manifest(out)
    return 0


def cmd_cluster(cfg, checkpoint=None) -> int:
    out = _prepare(cfg)
    rows = []
    for seed in cfg["seeds"]:
        spec = replace(cfg["spec"], seed=seed)
        data = build_benchmark(spec.benchmark, spec.K, seed)
        model = _pretrained(spec, data, checkpoint)
        truth = [c.labels("metrics") for c in data.target_clients]
        pseudo, metrics = pseudo_label_stage(model, data.target_clients, spec.d, truth)
        for c, ds, m in zip(data.target_clients, pseudo, metrics):
            save_partition(out / f"cluster-seed{seed}-{c.name}.txt", Partition(ds.identities))
            save_metrics(out / f"cluster-seed{seed}-{c.name}.json", m, clusters=ds.num_identities, d=spec.d)
            rows.append({"seed": seed, "client": c.name, "clusters": ds.num_identities, **m.as_record()})
    _write_rows(out / "cluster_metrics.csv", rows)
    write_manifest(out)
    return 0


def _summary_text(cfg, rows) -> str:
    keys = ["method", "seed", "target_verification_accuracy", "target_rank1", "target_tar@far=0.01",
            "source_verification_accuracy", "comm_rounds"]
    head = [f"feduda {__version__}", f"benchmark {cfg['spec'].benchmark}  seeds {cfg['seeds']}", ""]
    by_method = {}
    for r in rows:
        by_method.setdefault(r["method"], []).append(r["target_verification_accuracy"])
    med = [f"median target accuracy  {m}: {float(np.median(v)):.4f}" for m, v in by_method.items()]
    return "\n".join(head) + "\n" + aligned_table(rows, keys) + "\n" + "\n".join(med) + "\n"


def cmd_run(cfg) -> int:
    out = _prepare(cfg)
    (out / "checkpoints").mkdir(exist_ok=True)
    rows, traces_path, history = [], out / "traces.csv", []
    first_trace = True
    for seed in cfg["seeds"]:
        spec = replace(cfg["spec"], seed=seed)
        results = run_methods(spec, cfg["methods"])
        for method, res in results.items():
            rows.append(res.summary())
            save_checkpoint(out / "checkpoints" / f"{method}-seed{seed}.ckpt", res.backbone)
            history += [{"method": method, "seed": seed, **h} for h in res.history]
            if res.traces:
                # method/seed go into the client column so one stream holds every run
                tagged = []
                for tr in res.traces:
                    tr = replace(tr, losses={f"{method}/{seed}/{k}": v for k, v in tr.losses.items()},
                                 drift={f"{method}/{seed}/{k}": v for k, v in tr.drift.items()})
                    tagged.append(tr)
                write_traces_csv(traces_path, tagged, append=not first_trace)
                first_trace = False
    _write_rows(out / "metrics.csv", rows)
    if history:
        _write_rows(out / "history.csv", history)
    (out / "summary.txt").write_text(_summary_text(cfg, rows))
    (out / "summary.json").write_text(json.dumps(
        {"version": __version__, "config": _resolved_record(cfg), "results": [{k: _fmt(v) for k, v in r.items()} for r in rows]},
        indent=2, sort_keys=True) + "\n")
    write_manifest(out)
    return 0


def cmd_sweep(cfg, axis, values) -> int:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"--axis must be one of {sorted(SWEEP_AXES)}")
    values = [v for v in (values or "").split(",") if v.strip()]
    if not values:
        raise ConfigError("--values needs at least one value")
    out = _prepare(cfg)
    spec = cfg["spec"]
    if len(cfg["methods"]) > 1:
        raise ConfigError("sweep runs a single method")
    spec = replace(spec, method=cfg["methods"][0])
    attr = SWEEP_AXES[axis]
    try:
        parsed = [_coerce(attr, float(v) if attr in ("lam", "d") else v) for v in values]
    except ValueError as exc:
        raise ConfigError(f"bad sweep value: {exc}")
    rows = []
    for seed in cfg["seeds"]:
        rows += sweep(replace(spec, seed=seed), axis, parsed)
    _write_rows(out / "sweep.csv", rows)
    keys = ["axis", "value", "seed", "rounds", "target_verification_accuracy", "source_verification_accuracy"]
    keys += [k for k in ("fedavg_reference", "client_identities") if k in rows[0]]
    (out / "sweep.txt").write_text(aligned_table(rows, keys))
    write_manifest(out)
    return 0


def cmd_evaluate(cfg, checkpoint) -> int:
    if not checkpoint:
        raise ConfigError("evaluate needs --checkpoint")
    out = _prepare(cfg)
    params = load_checkpoint(checkpoint)
    backbone = params.backbone if isinstance(params, ModelParams) else params
    rows = []
    for seed in cfg["seeds"]:
        data = build_benchmark(cfg["spec"].benchmark, 1, seed)
        for name, split in (("source", data.source_eval), ("target", data.target_eval)):
            rep = evaluate(backbone, split)
            rows.append({"seed": seed, "domain": name, **rep.as_record()})
            write_roc_csv(out / f"roc-seed{seed}-{name}.csv", roc_points(backbone, split))
    _write_rows(out / "eval.csv", rows)
    (out / "eval.json").write_text(json.dumps(rows, indent=2) + "\n")
    write_manifest(out)
    return 0


# -- argument parsing ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feduda", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"feduda {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--out", help=f"output directory (env {OUTPUT_ENV} also works)")
    common.add_argument("--seeds", help="comma-separated seed list, default 0")
    common.add_argument("--methods", help="comma-separated methods (run only)")
    for name, f in SPEC_FIELDS.items():
        if name == "seed":
            continue
        kind = str if name in ("hidden",) else type(f.default)
        common.add_argument(f"--{name}", type=kind, default=None, dest=name)

    sub.add_parser("generate", parents=[common], help="write datasets, eval splits and a manifest")
    sub.add_parser("pretrain", parents=[common], help="train on the source domain and save checkpoints")
    p = sub.add_parser("cluster", parents=[common], help="pseudo-label target clients")
    p.add_argument("--checkpoint", help="use this pre-trained model instead of training one")
    sub.add_parser("run", parents=[common], help="run methods end to end")
    p = sub.add_parser("sweep", parents=[common], help="sweep one hyperparameter")
    p.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    p.add_argument("--values", required=True, help="comma-separated values")
    p = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint on both domains")
    p.add_argument("--checkpoint", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args)
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "pretrain":
            return cmd_pretrain(cfg)
        if args.command == "cluster":
            return cmd_cluster(cfg, args.checkpoint)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.axis, args.values)
        return cmd_evaluate(cfg, args.checkpoint)
    except ConfigError as exc:
        print(f"feduda: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - surfaced as a diagnostic plus exit status
        print(f"feduda: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
