"""Experiment configs, the frequency-configuration matrix, participant ablation and reports."""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import os
import platform
import typing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy

from .autodiff import HyperParams
from .data import (
    ConfigError,
    DatasetManifest,
    Fold,
    SplitPlan,
    SynthSpec,
    USI_HEAR_CLASSES,
    assign_frequencies,
    build_client_windows,
    gen_synthetic,
    imbalanced_spec,
    load_csv,
    make_kfold,
    make_monte_carlo,
)
from .dsp import RawStream, SensorWindow, default_spectrogram_config
from .fed import ClientState, centralized_train, run_rounds
from .metrics import MetricsReport, compute_metrics
from .model import ModelConfig, ParamTree, SensorSpec, predict_proba, serialize

VARIANTS = ("low-only", "down-low", "high-only", "multi", "ideal-high")
MATRIX_ROWS = ("low-only", "down-low", "high-only", "multi@low", "multi@high", "ideal-high")
MATRIX_COLUMNS = ("config", "fold_mean_f1", "fold_std_f1", "fold_mean_acc", "fold_std_acc", "n_part_low", "n_part_high")
ABLATION_COLUMNS = ("mode", "n_participants", "fold_mean_f1", "fold_std_f1", "fold_mean_acc", "fold_std_acc")
PACKAGE_VERSION = "0.1.0"


# ---------------------------------------------------------------------------
# experiment configuration

_SECTIONS = {
    "experiment": ("name", "mode", "seed", "out_dir"),
    "data": (
        "source", "n_participants", "seconds_per_class", "imbalanced", "noise_scale",
        "window_seconds", "overlap", "sensor_subset",
    ),
    "frequencies": ("low_fs", "high_fs"),
    "split": ("protocol", "folds", "train_frac"),
    "model": ("temporal_channels", "spectral_channels", "spectral_units", "latent_dim", "head_units", "granularity"),
    "training": ("learning_rate", "batch_size", "l2_rate", "dropout_rate", "rounds", "epochs"),
    "ablation": ("ablation_counts", "ablation_folds"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    mode: str = "federated"
    seed: int = 0
    out_dir: str = "runs"
    # "synth" or a path to a dataset manifest
    source: str = "synth"
    n_participants: int = 14
    seconds_per_class: float = 60.0
    imbalanced: bool = False
    noise_scale: float = 1.0
    window_seconds: float = 2.0
    overlap: float = 0.5
    sensor_subset: tuple[str, ...] = ()
    low_fs: float = 5.0
    high_fs: float = 40.0
    protocol: str = "monte_carlo"
    folds: int = 10
    train_frac: float = 0.7
    temporal_channels: tuple[int, ...] = (16, 16, 32, 32)
    spectral_channels: tuple[int, ...] = (8, 16, 16)
    spectral_units: int = 64
    latent_dim: int = 64
    head_units: int = 128
    granularity: str = "sensor"
    learning_rate: float = 1e-4
    batch_size: int = 32
    l2_rate: float = 1e-4
    dropout_rate: float = 0.5
    rounds: int = 20
    epochs: int = 20
    ablation_counts: tuple[int, ...] = (2, 3, 4, 6, 8)
    # 0 means every fold of the plan
    ablation_folds: int = 0

    def __post_init__(self):
        if self.mode not in ("federated", "centralized"):
            raise ConfigError(f"mode must be federated or centralized, got {self.mode!r}")
        if self.protocol not in ("monte_carlo", "kfold"):
            raise ConfigError(f"protocol must be monte_carlo or kfold, got {self.protocol!r}")
        if self.low_fs <= 0 or self.high_fs < self.low_fs:
            raise ConfigError("need 0 < low_fs <= high_fs")
        for fs in (self.low_fs, self.high_fs):
            n = int(round(self.window_seconds * fs))
            if n < default_spectrogram_config(fs).win_len:
                raise ConfigError(f"{fs:g} Hz windows of {self.window_seconds} s are shorter than the STFT window")
        if self.rounds < 0 or self.epochs < 0:
            raise ConfigError("rounds and epochs must be non-negative")
        try:
            self.hyper_params()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    # -- file format ------------------------------------------------------

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_ini(path.read_text(encoding="utf-8"), base_dir=path.parent)

    @classmethod
    def from_ini(cls, text: str, base_dir: Path | None = None) -> "ExperimentConfig":
        cp = configparser.ConfigParser()
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        hints = typing.get_type_hints(cls)
        values = {}
        for section in cp.sections():
            if section == "provenance":
                continue
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in cp[section].items():
                if key not in _SECTIONS[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                values[key] = _parse(raw, hints[key], key)
        src = values.get("source")
        if src and src != "synth" and base_dir is not None and not Path(src).is_absolute():
            values["source"] = str((base_dir / src).resolve())
        return cls(**values)

    def to_ini(self) -> str:
        lines = []
        for section, keys in _SECTIONS.items():
            lines.append(f"[{section}]")
            for k in keys:
                lines.append(f"{k} = {_format(getattr(self, k))}")
            lines.append("")
        return "\n".join(lines)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:16]

    # -- derived objects --------------------------------------------------

    def hyper_params(self) -> HyperParams:
        return HyperParams(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            l2_rate=self.l2_rate,
            dropout_rate=self.dropout_rate,
        )

    def synth_spec(self) -> SynthSpec:
        kw = dict(
            n_participants=self.n_participants, seconds_per_class=self.seconds_per_class, noise_scale=self.noise_scale
        )
        return imbalanced_spec(**kw) if self.imbalanced else SynthSpec(**kw)

    def model_config(self, frequencies, sensors: Sequence[SensorSpec], n_classes: int) -> ModelConfig:
        return ModelConfig(
            frequencies=tuple(frequencies),
            sensors=tuple(sensors),
            n_classes=n_classes,
            hp=self.hyper_params(),
            window_seconds=self.window_seconds,
            temporal_channels=self.temporal_channels,
            spectral_channels=self.spectral_channels,
            spectral_units=self.spectral_units,
            latent_dim=self.latent_dim,
            head_units=self.head_units,
            granularity=self.granularity,
        )


def _parse(raw: str, hint, key: str):
    raw = raw.strip()
    try:
        if hint is bool:
            if raw.lower() not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "yes", "1")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if typing.get_origin(hint) is tuple:
            (inner, _) = typing.get_args(hint)
            return tuple(inner(x.strip()) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


# ---------------------------------------------------------------------------
# datasets and windows


@dataclass
class Dataset:
    streams: dict[str, RawStream]
    classes: list[str]
    sensors: list[SensorSpec]

    @property
    def participants(self) -> list[str]:
        return sorted(self.streams)


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.source == "synth":
        spec = cfg.synth_spec()
        streams = gen_synthetic(spec, cfg.seed)
        sensors = [SensorSpec(s, tuple(a)) for s, a in spec.sensors]
        return Dataset(streams, spec.classes, sensors)
    manifest = DatasetManifest.read(cfg.source)
    streams = load_csv(manifest)
    return Dataset(streams, list(manifest.classes), [SensorSpec(s, tuple(a)) for s, a in manifest.sensors])


class WindowBank:
    """Memoised per-(participant, fs) windows."""

    def __init__(self, ds: Dataset, cfg: ExperimentConfig):
        self.ds, self.cfg = ds, cfg
        self._cache: dict[tuple[str, float], list[SensorWindow]] = {}

    def get(self, pid: str, fs: float) -> list[SensorWindow]:
        key = (pid, float(fs))
        if key not in self._cache:
            c = self.cfg
            subset = c.sensor_subset or None
            self._cache[key] = build_client_windows(self.ds.streams[pid], fs, c.window_seconds, c.overlap, subset, pid)
        return self._cache[key]

    def clients(self, fs_of: dict[str, float]) -> list[ClientState]:
        return [ClientState(f"{pid}@{fs:g}Hz", self.get(pid, fs)) for pid, fs in sorted(fs_of.items())]

    def pooled(self, pids: Sequence[str], fs: float) -> list[SensorWindow]:
        return [w for pid in sorted(pids) for w in self.get(pid, fs)]


def make_plan(cfg: ExperimentConfig, participants: Sequence[str]) -> SplitPlan:
    if cfg.protocol == "kfold":
        return make_kfold(participants, cfg.folds, cfg.seed)
    return make_monte_carlo(participants, cfg.folds, cfg.train_frac, cfg.seed)


def fold_seed(cfg: ExperimentConfig, fold_idx: int) -> int:
    return cfg.seed * 1000 + fold_idx


def native_rates(cfg: ExperimentConfig, fold: Fold, fold_idx: int) -> dict[str, float]:
    if cfg.low_fs == cfg.high_fs:
        return {p: float(cfg.high_fs) for p in fold.train}
    return assign_frequencies(fold.train, cfg.low_fs, cfg.high_fs, fold_seed(cfg, fold_idx))


def variant_rates(cfg: ExperimentConfig, variant: str, native: dict[str, float]) -> dict[str, float]:
    """Training participant -> rate used by ``variant``."""
    low, high = float(cfg.low_fs), float(cfg.high_fs)
    if variant == "low-only":
        return {p: low for p, fs in native.items() if fs == low}
    if variant == "high-only":
        return {p: high for p, fs in native.items() if fs == high}
    if variant == "down-low":
        return {p: low for p in native}
    if variant == "ideal-high":
        return {p: high for p in native}
    if variant == "multi":
        return dict(native)
    raise ConfigError(f"unknown variant {variant!r}")


def train_once(
    cfg: ExperimentConfig,
    bank: WindowBank,
    train_rates: dict[str, float],
    val_ids: Sequence[str],
    seed: int,
    mode: str | None = None,
    run_dir: str | Path | None = None,
) -> tuple[ParamTree, ModelConfig, list]:
    """Train one model; validation participants are evaluated at every rate the model has."""
    mode = mode or cfg.mode
    freqs = sorted(set(train_rates.values()))
    if not freqs:
        raise ConfigError("variant has no training participants")
    mcfg = cfg.model_config(freqs, bank.ds.sensors, len(bank.ds.classes))
    val_rates = [(p, fs) for p in sorted(val_ids) for fs in freqs]
    if mode == "federated":
        val = [ClientState(f"val:{p}@{fs:g}Hz", bank.get(p, fs)) for p, fs in val_rates]
        params, logs = run_rounds(bank.clients(train_rates), mcfg, cfg.rounds, val, seed, run_dir)
    else:
        pooled = [w for p, fs in sorted(train_rates.items()) for w in bank.get(p, fs)]
        val = [w for p, fs in val_rates for w in bank.get(p, fs)]
        params, logs = centralized_train(pooled, mcfg, cfg.epochs, val, seed, run_dir)
    return params, mcfg, logs


def evaluate(params: ParamTree, mcfg: ModelConfig, windows: Sequence[SensorWindow]) -> MetricsReport:
    probs = predict_proba(windows, params, mcfg)
    return compute_metrics(probs, np.array([w.label for w in windows], dtype=np.int64))


# ---------------------------------------------------------------------------
# experiment matrix


@dataclass
class MatrixRow:
    config: str
    fold_mean_f1: float
    fold_std_f1: float
    fold_mean_acc: float
    fold_std_acc: float
    n_part_low: int
    n_part_high: int
    fold_mean_ce: float = 0.0

    def csv_fields(self) -> list[str]:
        return [self.config] + [repr(float(getattr(self, c))) for c in MATRIX_COLUMNS[1:5]] + [
            str(self.n_part_low),
            str(self.n_part_high),
        ]


@dataclass
class MatrixRun:
    rows: list[MatrixRow]
    details: list[dict]
    plan_id: str
    checkpoints: dict[str, bytes] = field(default_factory=dict, repr=False)

    def row(self, name: str) -> MatrixRow:
        return next(r for r in self.rows if r.config == name)


_WORKER_STATE: dict = {}


def _init_worker(cfg, ds):
    _WORKER_STATE["cfg"] = cfg
    _WORKER_STATE["bank"] = WindowBank(ds, cfg)


def _matrix_fold(args):
    fold_idx, fold, variants, mode = args
    cfg, bank = _WORKER_STATE["cfg"], _WORKER_STATE["bank"]
    native = native_rates(cfg, fold, fold_idx)
    low, high = float(cfg.low_fs), float(cfg.high_fs)
    details, blobs = [], {}
    for variant in variants:
        rates = variant_rates(cfg, variant, native)
        params, mcfg, logs = train_once(cfg, bank, rates, fold.val, fold_seed(cfg, fold_idx), mode)
        blob = serialize(params)
        digest = hashlib.sha256(blob).hexdigest()
        blobs[f"{variant}_fold{fold_idx:02d}"] = blob
        if variant == "multi":
            evals = [("multi@low", low), ("multi@high", high)]
        else:
            evals = [(variant, low if variant in ("low-only", "down-low") else high)]
        n_low = sum(1 for fs in rates.values() if fs == low)
        n_high = sum(1 for fs in rates.values() if fs == high and high != low)
        for row_name, fs in evals:
            rep = evaluate(params, mcfg, bank.pooled(fold.test, fs))
            details.append(
                {
                    "config": row_name,
                    "fold": fold_idx,
                    "mode": mode,
                    "seed": cfg.seed,
                    "eval_fs": fs,
                    "accuracy": rep.accuracy,
                    "macro_f1": rep.macro_f1,
                    "ce_loss": rep.ce_loss,
                    "n_windows": rep.n_windows,
                    "n_part_low": n_low,
                    "n_part_high": n_high,
                    "train": sorted(rates),
                    "val": list(fold.val),
                    "test": list(fold.test),
                    "best_round": next((g.round for g in logs if g.best), 0),
                    "checkpoint_sha256": digest,
                }
            )
    return details, blobs


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("FEDFREQ_WORKERS", "1")))
    except ValueError:
        raise ConfigError("FEDFREQ_WORKERS must be an integer") from None


def _run_folds(cfg: ExperimentConfig, ds: Dataset, fn, jobs: list):
    n = min(_workers(), len(jobs))
    if n <= 1:
        _init_worker(cfg, ds)
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(n, initializer=_init_worker, initargs=(cfg, ds)) as pool:
        return list(pool.map(fn, jobs))


def _summarise(name: str, recs: list[dict]) -> MatrixRow:
    f1 = np.array([r["macro_f1"] for r in recs])
    acc = np.array([r["accuracy"] for r in recs])
    ce = np.array([r["ce_loss"] for r in recs])
    return MatrixRow(
        name, float(f1.mean()), float(f1.std()), float(acc.mean()), float(acc.std()),
        recs[0]["n_part_low"], recs[0]["n_part_high"], float(ce.mean()),
    )


def run_matrix(
    cfg: ExperimentConfig,
    variants: Sequence[str] = VARIANTS,
    mode: str | None = None,
    dataset: Dataset | None = None,
) -> MatrixRun:
    """Train every variant on every fold of one shared split plan."""
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}")
    ds = dataset or load_dataset(cfg)
    plan = make_plan(cfg, ds.participants)
    jobs = [(i, f, tuple(variants), mode or cfg.mode) for i, f in enumerate(plan)]
    details, blobs = [], {}
    for d, b in _run_folds(cfg, ds, _matrix_fold, jobs):
        details.extend(d)
        blobs.update(b)
    rows = []
    for name in MATRIX_ROWS:
        recs = [d for d in details if d["config"] == name]
        if recs:
            rows.append(_summarise(name, recs))
    return MatrixRun(rows, details, plan.plan_id, blobs)


# ---------------------------------------------------------------------------
# participant ablation


def nested_subsets(pool: Sequence[str], counts: Sequence[int], seed: int) -> dict[int, list[str]]:
    """Prefixes of one seeded permutation, so smaller subsets nest in larger ones."""
    ids = sorted(pool)
    for n in counts:
        if n < 1 or n > len(ids):
            raise ConfigError(f"ablation count {n} outside 1..{len(ids)} available training participants")
    perm = [ids[j] for j in np.random.default_rng([seed, 0xAB]).permutation(len(ids))]
    return {n: sorted(perm[:n]) for n in counts}


def _ablation_fold(args):
    fold_idx, fold, counts, modes = args
    cfg, bank = _WORKER_STATE["cfg"], _WORKER_STATE["bank"]
    high = float(cfg.high_fs)
    subsets = nested_subsets(fold.train, counts, fold_seed(cfg, fold_idx))
    out = []
    for mode in modes:
        for n in counts:
            rates = {p: high for p in subsets[n]}
            params, mcfg, _ = train_once(cfg, bank, rates, fold.val, fold_seed(cfg, fold_idx), mode)
            rep = evaluate(params, mcfg, bank.pooled(fold.test, high))
            out.append(
                {
                    "mode": mode,
                    "n_participants": n,
                    "fold": fold_idx,
                    "seed": cfg.seed,
                    "participants": subsets[n],
                    "accuracy": rep.accuracy,
                    "macro_f1": rep.macro_f1,
                    "ce_loss": rep.ce_loss,
                    "checkpoint_sha256": hashlib.sha256(serialize(params)).hexdigest(),
                }
            )
    return out


@dataclass
class AblationRow:
    mode: str
    n_participants: int
    fold_mean_f1: float
    fold_std_f1: float
    fold_mean_acc: float
    fold_std_acc: float


@dataclass
class AblationRun:
    rows: list[AblationRow]
    details: list[dict]
    plan_id: str


def run_participant_ablation(
    cfg: ExperimentConfig,
    counts: Sequence[int] | None = None,
    modes: Sequence[str] = ("federated", "centralized"),
    dataset: Dataset | None = None,
) -> AblationRun:
    """Train on nested participant subsets of each fold's training pool at ``high_fs``."""
    counts = tuple(counts or cfg.ablation_counts)
    ds = dataset or load_dataset(cfg)
    plan = make_plan(cfg, ds.participants)
    folds = list(enumerate(plan))
    if cfg.ablation_folds:
        folds = folds[: cfg.ablation_folds]
    for _, f in folds:
        nested_subsets(f.train, counts, 0)  # validates counts against the pool
    details = [d for part in _run_folds(cfg, ds, _ablation_fold, [(i, f, counts, tuple(modes)) for i, f in folds]) for d in part]
    rows = []
    for mode in modes:
        for n in counts:
            recs = [d for d in details if d["mode"] == mode and d["n_participants"] == n]
            f1 = np.array([r["macro_f1"] for r in recs])
            acc = np.array([r["accuracy"] for r in recs])
            rows.append(AblationRow(mode, n, float(f1.mean()), float(f1.std()), float(acc.mean()), float(acc.std())))
    return AblationRun(rows, details, plan.plan_id)


# ---------------------------------------------------------------------------
# reports


def provenance(cfg: ExperimentConfig, plan_id: str) -> str:
    cp = configparser.ConfigParser()
    cp["provenance"] = {
        "seed": str(cfg.seed),
        "config_hash": cfg.config_hash(),
        "plan_id": plan_id,
        "package_version": PACKAGE_VERSION,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }
    buf = io.StringIO()
    cp.write(buf)
    return cfg.to_ini() + buf.getvalue()


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[str]]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_jsonl(path: Path, records: Sequence[dict], extra: dict) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({**extra, **r}, sort_keys=True) + "\n")


def emit_report(run, cfg: ExperimentConfig, out_dir: str | Path) -> list[Path]:
    """Write the summary CSV, per-fold JSON lines and the resolved config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    extra = {"config_hash": cfg.config_hash(), "run_seed": cfg.seed}
    if isinstance(run, MatrixRun):
        summary = out / "matrix.csv"
        _write_csv(summary, MATRIX_COLUMNS, [r.csv_fields() for r in run.rows])
        ckpt_dir = out / "checkpoints"
        ckpt_dir.mkdir(exist_ok=True)
        for name, blob in sorted(run.checkpoints.items()):
            (ckpt_dir / f"{name}.bin").write_bytes(blob)
    else:
        summary = out / "ablation.csv"
        _write_csv(
            summary,
            ABLATION_COLUMNS,
            [[r.mode, str(r.n_participants)] + [repr(float(v)) for v in _ablation_values(r)] for r in run.rows],
        )
    _write_jsonl(out / "metrics.jsonl", run.details, extra)
    (out / "config.resolved").write_text(provenance(cfg, run.plan_id), encoding="utf-8")
    return [summary, out / "metrics.jsonl", out / "config.resolved"]


def _ablation_values(r: AblationRow) -> list[float]:
    return [r.fold_mean_f1, r.fold_std_f1, r.fold_mean_acc, r.fold_std_acc]


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})


__all__ = [
    "ExperimentConfig", "MatrixRow", "MatrixRun", "AblationRow", "AblationRun", "Dataset", "WindowBank",
    "MetricsReport", "compute_metrics", "run_matrix", "run_participant_ablation", "emit_report",
    "load_dataset", "make_plan", "train_once", "evaluate", "nested_subsets", "USI_HEAR_CLASSES",
]
