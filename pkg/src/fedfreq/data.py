"""Dataset ingestion, synthetic multi-rate activity data and person-independent splits."""

from __future__ import annotations

import configparser
import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dsp import RawStream, SensorWindow, decimate, decimation_stages, window_stream


class IngestionError(ValueError):
    pass


class ConfigError(ValueError):
    pass


USI_HEAR_CLASSES = (
    "speak_walk",
    "head_shaking",
    "speaking",
    "nodding",
    "eating",
    "walking",
    "staying",
)
OCOSENSE_CLASSES = ("sitting", "standing", "laying", "walking", "transition", "jogging", "stair_climbing")
# class shares reported for the smart-glasses recordings, in percent
OCOSENSE_SHARES = (39.3, 27.3, 18.3, 9.1, 2.2, 1.7, 1.7)


# ---------------------------------------------------------------------------
# manifests and CSV


@dataclass
class DatasetManifest:
    name: str
    sensors: list[tuple[str, tuple[str, ...]]]
    fs_base: float
    classes: list[str]
    participants: dict[str, Path]

    def __post_init__(self):
        if not self.classes:
            raise ConfigError("manifest lists no classes")
        if len(set(self.classes)) != len(self.classes):
            raise ConfigError("duplicate class names in manifest")

    @property
    def channel_names(self) -> list[str]:
        return [f"{s}_{a}" for s, axes in self.sensors for a in axes]

    @classmethod
    def read(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"manifest not found: {path}")
        cp = configparser.ConfigParser()
        cp.optionxform = str  # participant ids are case sensitive
        ids_seen: list[str] = []
        text = path.read_text(encoding="utf-8")
        in_participants = False
        for line in text.splitlines():
            stripped = line.strip()
            if stripped.startswith("["):
                in_participants = stripped == "[participants]"
            elif in_participants and "=" in stripped and not stripped.startswith(("#", ";")):
                ids_seen.append(stripped.split("=", 1)[0].strip())
        if len(ids_seen) != len(set(ids_seen)):
            raise ConfigError(f"{path}: duplicate participant ids")
        try:
            cp.read_string(text, source=str(path))
            ds = cp["dataset"]
            sensors = []
            for item in ds["sensors"].split(";"):
                sname, axes = item.strip().split(":")
                sensors.append((sname.strip(), tuple(a.strip() for a in axes.split(","))))
            parts = {pid: (path.parent / rel).resolve() for pid, rel in cp["participants"].items()}
            return cls(
                name=ds["name"].strip(),
                sensors=sensors,
                fs_base=float(ds["fs_base"]),
                classes=[c.strip() for c in ds["classes"].split(",") if c.strip()],
                participants=parts,
            )
        except (KeyError, ValueError, configparser.Error) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{path}: malformed manifest ({exc})") from exc

    def write(self, path: str | Path) -> None:
        path = Path(path)
        lines = [
            "[dataset]",
            f"name = {self.name}",
            f"fs_base = {self.fs_base:g}",
            "sensors = " + "; ".join(f"{s}:{','.join(a)}" for s, a in self.sensors),
            "classes = " + ", ".join(self.classes),
            "",
            "[participants]",
        ]
        for pid, p in self.participants.items():
            p = Path(p)
            try:
                rel = p.relative_to(path.parent.resolve()) if p.is_absolute() else p
            except ValueError:
                rel = p
            lines.append(f"{pid} = {rel.as_posix()}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_stream_csv(path: str | Path, manifest: DatasetManifest) -> RawStream:
    path = Path(path)
    expected = ["t"] + manifest.channel_names + ["label"]
    label_ids = {c: i for i, c in enumerate(manifest.classes)}
    ts, rows, labels = [], [], []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != expected:
            raise IngestionError(f"{path}: header {header} does not match {expected}")
        prev = -np.inf
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(expected):
                raise IngestionError(f"{path}: row {lineno} has {len(rec)} fields, expected {len(expected)}")
            try:
                t = float(rec[0])
                vals = [float(v) for v in rec[1:-1]]
            except ValueError as exc:
                raise IngestionError(f"{path}: row {lineno}: {exc}") from None
            if not t > prev:
                raise IngestionError(f"{path}: row {lineno}: timestamp {t!r} not strictly increasing")
            lab = rec[-1]
            if lab not in label_ids:
                raise IngestionError(f"{path}: row {lineno}: unknown label {lab!r}")
            prev = t
            ts.append(t)
            rows.append(vals)
            labels.append(label_ids[lab])
    data = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(expected) - 2).T
    return RawStream(data, manifest.fs_base, np.asarray(labels, dtype=np.int64), manifest.channel_names, np.asarray(ts))


def load_csv(manifest: DatasetManifest) -> dict[str, RawStream]:
    out = {}
    for pid, path in manifest.participants.items():
        if not Path(path).is_file():
            raise IngestionError(f"data file for participant {pid!r} not found: {path}")
        out[pid] = read_stream_csv(path, manifest)
    return out


def export_csv(stream: RawStream, path: str | Path, classes: Sequence[str]) -> None:
    t = stream.timestamps if stream.timestamps is not None else np.arange(len(stream)) / stream.fs
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + list(stream.channel_names) + ["label"])
        for i in range(len(stream)):
            w.writerow(
                [repr(float(t[i]))]
                + [repr(float(v)) for v in stream.channels[:, i]]
                + [classes[int(stream.labels[i])]]
            )


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class ClassRecipe:
    """Sum of sinusoids; ``gains`` holds one per-channel gain vector per component."""

    name: str
    freqs: tuple[float, ...]
    amps: tuple[float, ...]
    gains: tuple[tuple[float, ...], ...]
    noise: float = 0.05

    @property
    def dominant_freq(self) -> float:
        return self.freqs[int(np.argmax(self.amps))]


#               acc_x acc_y acc_z gyr_x gyr_y gyr_z
_DEFAULT_RECIPES = (
    ClassRecipe("speak_walk", (8.0, 2.0), (0.6, 0.35), ((0.3, 0.3, 1.0, 0.2, 0.2, 0.2), (0.5, 0.2, 1.0, 0.3, 0.3, 0.3))),
    ClassRecipe("head_shaking", (1.5,), (0.8,), ((0.6, 0.1, 0.1, 0.1, 0.1, 1.0),)),
    ClassRecipe("speaking", (5.0, 0.3), (0.5, 0.15), ((0.2, 0.2, 1.0, 0.4, 0.2, 0.1), (0.2, 1.0, 0.2, 0.2, 0.2, 0.2))),
    ClassRecipe("nodding", (1.0,), (0.8,), ((0.1, 0.6, 0.3, 0.1, 1.0, 0.1),)),
    ClassRecipe("eating", (3.0, 0.8), (0.6, 0.3), ((0.2, 1.0, 0.5, 0.8, 0.2, 0.2), (0.1, 0.3, 0.1, 0.1, 1.0, 0.1))),
    ClassRecipe("walking", (2.0, 4.0), (0.7, 0.3), ((0.5, 0.2, 1.0, 0.3, 0.3, 0.3), (0.3, 0.1, 1.0, 0.1, 0.1, 0.1))),
    ClassRecipe("staying", (0.5,), (0.08,), ((1.0, 1.0, 1.0, 0.5, 0.5, 0.5),), noise=0.04),
)


@dataclass(frozen=True)
class SynthSpec:
    n_participants: int = 14
    recipes: tuple[ClassRecipe, ...] = _DEFAULT_RECIPES
    fs_base: float = 120.0
    seconds_per_class: float = 60.0
    # relative duration per class; None means balanced
    class_weights: tuple[float, ...] | None = None
    sensors: tuple[tuple[str, tuple[str, ...]], ...] = (("acc", ("x", "y", "z")), ("gyr", ("x", "y", "z")))
    amp_jitter: float = 0.25
    freq_jitter: float = 0.08
    mix_jitter: float = 0.1
    offset_scale: float = 0.1
    noise_scale: float = 1.0

    def __post_init__(self):
        doms = [r.dominant_freq for r in self.recipes]
        if len(set(doms)) != len(doms):
            raise ConfigError("class recipes need pairwise distinct dominant frequencies")
        if self.class_weights is not None and len(self.class_weights) != len(self.recipes):
            raise ConfigError("one class weight per recipe required")
        if self.n_participants < 1:
            raise ConfigError("n_participants must be positive")

    @property
    def classes(self) -> list[str]:
        return [r.name for r in self.recipes]

    @property
    def channel_names(self) -> list[str]:
        return [f"{s}_{a}" for s, axes in self.sensors for a in axes]

    def class_samples(self) -> list[int]:
        w = np.ones(len(self.recipes)) if self.class_weights is None else np.asarray(self.class_weights, float)
        w = w / w.mean()
        return [int(round(self.seconds_per_class * wi * self.fs_base)) for wi in w]


def imbalanced_spec(**overrides) -> SynthSpec:
    """Class durations proportional to the smart-glasses activity shares."""
    overrides.setdefault("class_weights", OCOSENSE_SHARES)
    return SynthSpec(**overrides)


def participant_ids(n: int) -> list[str]:
    return [f"p{i:02d}" for i in range(n)]


def gen_synthetic(spec: SynthSpec, seed: int) -> dict[str, RawStream]:
    """One stream per participant; each activity is one contiguous block in a
    participant-specific order. Deterministic in (spec, seed)."""
    n_ch = len(spec.channel_names)
    out = {}
    for i, pid in enumerate(participant_ids(spec.n_participants)):
        rng = np.random.default_rng([seed, i])
        # participant-level traits: sensor placement (axis mixing), orientation
        # offsets and overall movement style
        mix = np.eye(n_ch) + spec.mix_jitter * rng.normal(size=(n_ch, n_ch)) / np.sqrt(n_ch)
        offsets = spec.offset_scale * rng.normal(size=n_ch)
        style = np.exp(spec.amp_jitter * rng.normal())
        order = rng.permutation(len(spec.recipes))
        chunks, labels = [], []
        for c in order:
            rec = spec.recipes[c]
            n = spec.class_samples()[c]
            t = np.arange(n) / spec.fs_base
            sig = np.zeros((n_ch, n))
            for f, a, g in zip(rec.freqs, rec.amps, rec.gains):
                fj = f * (1.0 + spec.freq_jitter * rng.normal())
                aj = a * style * np.exp(spec.amp_jitter * rng.normal())
                phase = rng.uniform(0, 2 * np.pi, size=(n_ch, 1))
                sig += aj * np.asarray(g)[:, None] * np.sin(2 * np.pi * fj * t[None, :] + phase)
            sig = mix @ sig + offsets[:, None]
            sig += rec.noise * spec.noise_scale * rng.normal(size=sig.shape)
            chunks.append(sig)
            labels.append(np.full(n, c, dtype=np.int64))
        data = np.concatenate(chunks, axis=1)
        out[pid] = RawStream(data, spec.fs_base, np.concatenate(labels), spec.channel_names)
    return out


def synth_manifest(spec: SynthSpec, directory: str | Path, name: str = "synthetic") -> DatasetManifest:
    directory = Path(directory)
    return DatasetManifest(
        name=name,
        sensors=[(s, tuple(a)) for s, a in spec.sensors],
        fs_base=spec.fs_base,
        classes=spec.classes,
        participants={pid: directory / f"{pid}.csv" for pid in participant_ids(spec.n_participants)},
    )


# ---------------------------------------------------------------------------
# frequency assignment and splits


def assign_frequencies(participants: Iterable[str], low_fs: float, high_fs: float, seed: int) -> dict[str, float]:
    """Seeded half/half partition; with an odd count the extra participant runs at ``high_fs``."""
    ids = sorted(participants)
    perm = np.random.default_rng([seed, 0xF5]).permutation(len(ids))
    n_low = len(ids) // 2
    return {ids[j]: (float(low_fs) if r < n_low else float(high_fs)) for r, j in enumerate(perm)}


@dataclass(frozen=True)
class Fold:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]


@dataclass(frozen=True)
class SplitPlan:
    folds: tuple[Fold, ...]
    protocol: str
    seed: int
    params: dict = field(default_factory=dict, compare=False)

    @property
    def plan_id(self) -> str:
        blob = json.dumps(
            [self.protocol, self.seed, [[f.train, f.val, f.test] for f in self.folds]], sort_keys=True
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def __iter__(self):
        return iter(self.folds)

    def __len__(self) -> int:
        return len(self.folds)


def _split_held_out(held: Sequence[str]) -> tuple[tuple[str, ...], tuple[str, ...]]:
    n_val = len(held) // 2
    return tuple(sorted(held[:n_val])), tuple(sorted(held[n_val:]))


def make_kfold(participants: Iterable[str], k: int = 5, seed: int = 0) -> SplitPlan:
    ids = sorted(participants)
    if k < 2 or len(ids) < 2 * k:
        raise ConfigError(f"{k}-fold split needs at least {2 * k} participants, got {len(ids)}")
    perm = [ids[j] for j in np.random.default_rng([seed, 0x5F]).permutation(len(ids))]
    groups = np.array_split(np.arange(len(ids)), k)
    folds = []
    for g in groups:
        held = [perm[j] for j in g]
        val, test = _split_held_out(held)
        train = tuple(sorted(set(ids) - set(held)))
        folds.append(Fold(train, val, test))
    return SplitPlan(tuple(folds), "kfold", seed, {"k": k})


def make_monte_carlo(
    participants: Iterable[str], folds: int = 10, train_frac: float = 0.7, seed: int = 0
) -> SplitPlan:
    """Independent seeded resamples: round(n * train_frac) train (half up), the
    rest split val-then-test with any odd participant going to test."""
    ids = sorted(participants)
    if folds < 1:
        raise ConfigError("folds must be >= 1")
    if len(ids) < 3:
        raise ConfigError(f"Monte Carlo split needs at least 3 participants, got {len(ids)}")
    if not 0.0 < train_frac < 1.0:
        raise ConfigError("train_frac must lie in (0, 1)")
    n_train = min(max(1, int(np.floor(len(ids) * train_frac + 0.5))), len(ids) - 2)
    out = []
    for f in range(folds):
        perm = [ids[j] for j in np.random.default_rng([seed, 0x3C, f]).permutation(len(ids))]
        val, test = _split_held_out(perm[n_train:])
        out.append(Fold(tuple(sorted(perm[:n_train])), val, test))
    return SplitPlan(tuple(out), "monte_carlo", seed, {"folds": folds, "train_frac": train_frac})


# ---------------------------------------------------------------------------
# client windows


def resample_stream(stream: RawStream, fs: float) -> RawStream:
    """Decimate every channel to ``fs``; labels follow the kept samples."""
    if float(fs) == float(stream.fs):
        return stream
    r = int(np.prod(decimation_stages(stream.fs, fs)))
    return RawStream(decimate(stream.channels, stream.fs, fs), float(fs), stream.labels[::r], stream.channel_names)


def build_client_windows(
    stream: RawStream,
    fs: float,
    window_seconds: float = 2.0,
    overlap: float = 0.5,
    sensor_subset: Sequence[str] | None = None,
    participant: str = "",
) -> list[SensorWindow]:
    """Decimate, window, and zero-fill the rows of sensors outside ``sensor_subset``."""
    s = resample_stream(stream, fs)
    windows = window_stream(s, window_seconds, overlap)
    sensors = s.sensor_names
    absent = [] if sensor_subset is None else [i for i, n in enumerate(sensors) if n not in set(sensor_subset)]
    rows_of = [[r for r, ch in enumerate(s.channel_names) if ch.rsplit("_", 1)[0] == n] for n in sensors]
    for w in windows:
        w.participant = participant
        for i in absent:
            w.data[rows_of[i], :] = 0.0
            w.context[i] = 0.0
    return windows


def windows_by_participant(
    streams: Mapping[str, RawStream],
    fs_of: Mapping[str, float],
    window_seconds: float = 2.0,
    overlap: float = 0.5,
    sensor_subset: Sequence[str] | None = None,
) -> dict[str, list[SensorWindow]]:
    return {
        pid: build_client_windows(streams[pid], fs_of[pid], window_seconds, overlap, sensor_subset, pid)
        for pid in sorted(fs_of)
    }
