"""Command-line entry point: ``fedfreq <command> [--config PATH] [--seed N] [--out-dir DIR]``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import ConfigError, DatasetManifest, build_client_windows, export_csv, read_stream_csv, synth_manifest
from .fed import TrainingConfigError
from .harness import (
    VARIANTS,
    ExperimentConfig,
    WindowBank,
    emit_report,
    evaluate,
    fold_seed,
    load_dataset,
    make_plan,
    native_rates,
    provenance,
    run_matrix,
    run_participant_ablation,
    train_once,
    variant_rates,
)
from .model import SensorSpec, deserialize, infer_config, serialize

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out_dir is not None:
        cfg = replace(cfg, out_dir=args.out_dir)
    return cfg


def cmd_gen_synth(cfg: ExperimentConfig, args) -> dict:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = cfg.synth_spec()
    manifest = synth_manifest(spec, out, name=cfg.name)
    for pid, stream in sorted(load_dataset(replace(cfg, source="synth")).streams.items()):
        export_csv(stream, manifest.participants[pid], spec.classes)
    manifest.write(out / "manifest.ini")
    return {"manifest": str(out / "manifest.ini"), "participants": len(manifest.participants)}


def cmd_ingest(cfg: ExperimentConfig, args) -> dict:
    ds = load_dataset(cfg)
    summary = {
        "classes": ds.classes,
        "sensors": [s.name for s in ds.sensors],
        "participants": {
            pid: {
                "samples": len(s),
                "fs": s.fs,
                "class_counts": np.bincount(s.labels, minlength=len(ds.classes)).tolist(),
            }
            for pid, s in sorted(ds.streams.items())
        },
    }
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ingest.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return {"participants": len(ds.streams), "summary": str(out / "ingest.json")}


def _train(cfg: ExperimentConfig, args, mode: str) -> dict:
    ds = load_dataset(cfg)
    plan = make_plan(cfg, ds.participants)
    if not 0 <= args.fold < len(plan):
        raise ConfigError(f"fold {args.fold} outside 0..{len(plan) - 1}")
    fold = plan.folds[args.fold]
    bank = WindowBank(ds, cfg)
    rates = variant_rates(cfg, args.variant, native_rates(cfg, fold, args.fold))
    out = Path(cfg.out_dir)
    params, mcfg, logs = train_once(cfg, bank, rates, fold.val, fold_seed(cfg, args.fold), mode, out)
    blob = serialize(params)
    (out / "best.bin").write_bytes(blob)
    report = {
        f"{fs:g}Hz": evaluate(params, mcfg, bank.pooled(fold.test, fs)).to_dict() for fs in mcfg.frequencies
    }
    (out / "metrics.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    (out / "config.resolved").write_text(provenance(cfg, plan.plan_id), encoding="utf-8")
    best = next((g.round for g in logs if g.best), 0)
    return {"checkpoint": str(out / "best.bin"), "best_round": best, "test": report}


def cmd_run_matrix(cfg: ExperimentConfig, args) -> dict:
    run = run_matrix(cfg)
    files = emit_report(run, cfg, cfg.out_dir)
    return {"files": [str(f) for f in files], "rows": {r.config: r.fold_mean_f1 for r in run.rows}}


def cmd_ablate(cfg: ExperimentConfig, args) -> dict:
    counts = [int(c) for c in args.counts.split(",")] if args.counts else None
    run = run_participant_ablation(cfg, counts)
    files = emit_report(run, cfg, cfg.out_dir)
    return {"files": [str(f) for f in files]}


def cmd_evaluate(cfg: ExperimentConfig, args) -> dict:
    if not args.checkpoint or not args.data:
        raise ConfigError("evaluate needs --checkpoint and --data")
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    data = Path(args.data)
    if not data.is_file():
        raise ConfigError(f"data file not found: {data}")
    header = data.read_text(encoding="utf-8").split("\n", 1)[0].strip().split(",")
    channels = header[1:-1]
    sensors: list[tuple[str, list[str]]] = []
    for ch in channels:
        s, a = ch.rsplit("_", 1)
        if not sensors or sensors[-1][0] != s:
            sensors.append((s, []))
        sensors[-1][1].append(a)
    if cfg.source == "synth":
        classes = cfg.synth_spec().classes
    else:
        classes = DatasetManifest.read(cfg.source).classes
    ts = np.loadtxt(data, delimiter=",", skiprows=1, usecols=0, ndmin=1)
    fs_base = float(np.round(1.0 / np.median(np.diff(ts)), 6)) if len(ts) > 1 else 1.0
    manifest = DatasetManifest("eval", [(s, tuple(a)) for s, a in sensors], fs_base, list(classes), {})
    stream = read_stream_csv(data, manifest)
    params = deserialize(ckpt.read_bytes())
    mcfg = infer_config(params, [SensorSpec(s, tuple(a)) for s, a in sensors], cfg.hyper_params())
    mcfg = replace(mcfg, window_seconds=cfg.window_seconds)
    fs = float(args.fs) if args.fs else max(mcfg.frequencies)
    windows = build_client_windows(stream, fs, cfg.window_seconds, cfg.overlap, cfg.sensor_subset or None, data.stem)
    if not windows:
        raise ConfigError(f"{data} is too short for one {cfg.window_seconds} s window")
    return evaluate(params, mcfg, windows).to_dict()


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "ingest": cmd_ingest,
    "train-central": lambda cfg, a: _train(cfg, a, "centralized"),
    "train-fed": lambda cfg, a: _train(cfg, a, "federated"),
    "run-matrix": cmd_run_matrix,
    "ablate-participants": cmd_ablate,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fedfreq", description="Multi-frequency federated activity recognition experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="experiment config file (INI)")
        s.add_argument("--seed", type=int, help="override the config seed")
        s.add_argument("--out-dir", help="override the output directory")
        if name in ("train-central", "train-fed"):
            s.add_argument("--fold", type=int, default=0)
            s.add_argument("--variant", choices=VARIANTS, default="multi")
        if name == "ablate-participants":
            s.add_argument("--counts", help="comma-separated participant counts")
        if name == "evaluate":
            s.add_argument("--checkpoint")
            s.add_argument("--data", help="CSV file with the dataset column layout")
            s.add_argument("--fs", type=float, help="evaluation rate (default: highest in checkpoint)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _load_config(args)
        result = COMMANDS[args.command](cfg, args)
    except (ConfigError, TrainingConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(result, indent=1, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
