"""Multi-frequency spectro-temporal residual network.

One encoder per (sampling frequency, sensor) pair feeds a fusion head shared
by every frequency. Each window is routed to the encoders of its own
frequency; encoder outputs are masked by the window's sensor context and
concatenated in fixed sensor slots, so the head input layout does not depend
on the frequency.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, DimensionError, HyperParams, Tensor
from .dsp import SensorWindow, SpectrogramConfig, default_spectrogram_config, log_amp_spectrogram

HEAD = "head"
_DENSE_WEIGHTS = ("spec_dense.weight", "proj.weight", "fc1.weight", "fc2.weight")


class FrequencyMismatchError(ValueError):
    """A window's sampling rate has no matching encoder branch."""


class ParamFormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class SensorSpec:
    name: str
    axes: tuple[str, ...] = ("x", "y", "z")


@dataclass(frozen=True)
class EncoderConfig:
    fs: float
    window_len: int
    in_channels: int
    temporal: tuple[tuple[int, int], ...]
    spectral: tuple[int, ...]
    spec_cfg: SpectrogramConfig
    spectral_units: int
    latent_dim: int
    pool: int = 2

    def __post_init__(self):
        if len(self.temporal) != 4:
            raise ValueError("temporal path needs exactly 4 residual blocks")
        if len(self.spectral) != 3:
            raise ValueError("spectral path needs exactly 3 conv blocks")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be positive")

    @property
    def temporal_flat(self) -> int:
        return self.temporal[-1][0] * ((self.window_len - self.pool) // self.pool + 1)

    @property
    def spectral_flat(self) -> int:
        return self.spectral[-1] * self.spec_cfg.n_bins * self.spec_cfg.n_frames(self.window_len)


@dataclass(frozen=True)
class ModelConfig:
    frequencies: tuple[float, ...]
    sensors: tuple[SensorSpec, ...] = (SensorSpec("acc"), SensorSpec("gyr"))
    n_classes: int = 7
    hp: HyperParams = field(default_factory=HyperParams)
    window_seconds: float = 2.0
    temporal_channels: tuple[int, ...] = (16, 16, 32, 32)
    kernel_size: int = 3
    spectral_channels: tuple[int, ...] = (8, 16, 16)
    spectral_units: int = 64
    latent_dim: int = 64
    head_units: int = 128
    granularity: str = "sensor"  # or "axis": one encoder per sensor axis

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if not self.frequencies:
            raise ValueError("at least one frequency required")
        if len(self.temporal_channels) != 4 or len(self.spectral_channels) != 3:
            raise ValueError("need 4 temporal and 3 spectral block widths")
        if self.granularity not in ("sensor", "axis"):
            raise ValueError("granularity must be 'sensor' or 'axis'")
        object.__setattr__(self, "frequencies", tuple(sorted(float(f) for f in self.frequencies)))

    @property
    def n_rows(self) -> int:
        return sum(len(s.axes) for s in self.sensors)

    def slots(self) -> list[tuple[str, int, slice]]:
        """(slot name, sensor index, window rows) for every encoder slot."""
        out, row = [], 0
        for i, s in enumerate(self.sensors):
            if self.granularity == "sensor":
                out.append((s.name, i, slice(row, row + len(s.axes))))
            else:
                for j, a in enumerate(s.axes):
                    out.append((f"{s.name}_{a}", i, slice(row + j, row + j + 1)))
            row += len(s.axes)
        return out

    def encoder_config(self, fs: float) -> EncoderConfig:
        rows = len(self.sensors[0].axes) if self.granularity == "sensor" else 1
        return EncoderConfig(
            fs=fs,
            window_len=int(round(self.window_seconds * fs)),
            in_channels=rows,
            temporal=tuple((c, self.kernel_size) for c in self.temporal_channels),
            spectral=tuple(self.spectral_channels),
            spec_cfg=default_spectrogram_config(fs),
            spectral_units=self.spectral_units,
            latent_dim=self.latent_dim,
        )

    def branch_keys(self, fs: float | None = None) -> list[str]:
        freqs = self.frequencies if fs is None else (float(fs),)
        return [branch_key(f, name) for f in freqs for name, _, _ in self.slots()]


def branch_key(fs: float, slot: str) -> str:
    return f"{float(fs):g}Hz:{slot}"


class ParamTree:
    """Two-level mapping: branch key -> leaf name -> Tensor."""

    def __init__(self, branches: dict[str, dict[str, Tensor]]):
        self.branches = branches

    def __getitem__(self, key: str) -> dict[str, Tensor]:
        return self.branches[key]

    def __contains__(self, key: str) -> bool:
        return key in self.branches

    def keys(self) -> list[str]:
        return list(self.branches)

    def items(self):
        return self.branches.items()

    def leaves(self) -> Iterator[tuple[str, str, Tensor]]:
        for k, leaf in self.branches.items():
            for n, t in leaf.items():
                yield k, n, t

    def flat(self, keys: Sequence[str] | None = None) -> dict[str, Tensor]:
        keys = self.keys() if keys is None else keys
        return {f"{k}/{n}": t for k in keys for n, t in self.branches[k].items()}

    def copy(self) -> "ParamTree":
        # arrays are never mutated in place, so sharing them is safe
        return ParamTree(
            {k: {n: Tensor(t.data, t.requires_grad) for n, t in leaf.items()} for k, leaf in self.items()}
        )

    def num_params(self, trainable_only: bool = True) -> int:
        return sum(t.data.size for _, _, t in self.leaves() if t.requires_grad or not trainable_only)

    def structure(self) -> list[tuple[str, str, tuple[int, ...]]]:
        return [(k, n, t.shape) for k, n, t in self.leaves()]

    def bit_equal(self, other: "ParamTree", keys: Sequence[str] | None = None) -> bool:
        keys = self.keys() if keys is None else keys
        for k in keys:
            a, b = self.branches[k], other.branches[k]
            if a.keys() != b.keys():
                return False
            for n in a:
                if a[n].shape != b[n].shape or a[n].data.tobytes() != b[n].data.tobytes():
                    return False
        return True


# ---------------------------------------------------------------------------
# initialisation


def _conv_leaf(rng, prefix, out_c, in_c, *k) -> dict[str, Tensor]:
    fan_in = in_c * int(np.prod(k))
    return {
        f"{prefix}.weight": Tensor(ad.he_uniform(rng, (out_c, in_c, *k), fan_in), True),
        f"{prefix}.bias": Tensor(np.zeros(out_c), True),
    }


def _dense_leaf(rng, prefix, n_in, n_out) -> dict[str, Tensor]:
    return {
        f"{prefix}.weight": Tensor(ad.he_uniform(rng, (n_in, n_out), n_in), True),
        f"{prefix}.bias": Tensor(np.zeros(n_out), True),
    }


def init_encoder(rng: np.random.Generator, enc: EncoderConfig) -> dict[str, Tensor]:
    c_in = enc.in_channels
    p: dict[str, Tensor] = {
        "bn.gamma": Tensor(np.ones(c_in), True),
        "bn.beta": Tensor(np.zeros(c_in), True),
        "bn.running_mean": Tensor(np.zeros(c_in)),
        "bn.running_var": Tensor(np.ones(c_in)),
    }
    prev = c_in
    for i, (c, k) in enumerate(enc.temporal):
        p.update(_conv_leaf(rng, f"t{i}.conv1", c, prev, k))
        p.update(_conv_leaf(rng, f"t{i}.conv2", c, c, k))
        if c != prev:
            p.update(_conv_leaf(rng, f"t{i}.skip", c, prev, 1))
        prev = c
    prev = c_in
    for i, c in enumerate(enc.spectral):
        p.update(_conv_leaf(rng, f"s{i}", c, prev, 3, 3))
        prev = c
    p.update(_dense_leaf(rng, "spec_dense", enc.spectral_flat, enc.spectral_units))
    p.update(_dense_leaf(rng, "proj", enc.temporal_flat + enc.spectral_units, enc.latent_dim))
    return p


def init_params(cfg: ModelConfig, seed: int) -> ParamTree:
    rng = np.random.default_rng(seed)
    branches: dict[str, dict[str, Tensor]] = {}
    for fs in cfg.frequencies:
        enc = cfg.encoder_config(fs)
        for name, _, _ in cfg.slots():
            branches[branch_key(fs, name)] = init_encoder(rng, enc)
    n_in = len(cfg.slots()) * cfg.latent_dim
    head = {}
    head.update(_dense_leaf(rng, "fc1", n_in, cfg.head_units))
    head.update(_dense_leaf(rng, "fc2", cfg.head_units, cfg.n_classes))
    branches[HEAD] = head
    return ParamTree(branches)


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form trainable parameter count for ``cfg``."""
    total = 0
    n_slots = len(cfg.slots())
    for fs in cfg.frequencies:
        enc = cfg.encoder_config(fs)
        n = 2 * enc.in_channels
        prev = enc.in_channels
        for c, k in enc.temporal:
            n += c * prev * k + c + c * c * k + c
            if c != prev:
                n += c * prev + c
            prev = c
        prev = enc.in_channels
        for c in enc.spectral:
            n += c * prev * 9 + c
            prev = c
        n += enc.spectral_flat * enc.spectral_units + enc.spectral_units
        n += (enc.temporal_flat + enc.spectral_units) * enc.latent_dim + enc.latent_dim
        total += n * n_slots
    total += n_slots * cfg.latent_dim * cfg.head_units + cfg.head_units
    total += cfg.head_units * cfg.n_classes + cfg.n_classes
    return total


# ---------------------------------------------------------------------------
# forward pass


def _residual_block(h: Tensor, p: dict[str, Tensor], i: int, k: int, slope: float) -> Tensor:
    pad = (k - 1) // 2
    y = ad.conv1d(h, p[f"t{i}.conv1.weight"], p[f"t{i}.conv1.bias"], 1, pad)
    y = ad.leaky_relu(y, slope)
    y = ad.conv1d(y, p[f"t{i}.conv2.weight"], p[f"t{i}.conv2.bias"], 1, pad)
    skip = ad.conv1d(h, p[f"t{i}.skip.weight"], p[f"t{i}.skip.bias"]) if f"t{i}.skip.weight" in p else h
    return ad.leaky_relu(ad.add(y, skip), slope)


def _flatten_tail(t: Tensor, n_tail: int) -> Tensor:
    return ad.reshape(t, t.shape[:-n_tail] + (-1,))


def spectral_input(rows: np.ndarray, spec_cfg: SpectrogramConfig) -> np.ndarray:
    """dB spectrogram of every row, rescaled so the floor maps to -1 and 0 dB to +1."""
    db = log_amp_spectrogram(rows, spec_cfg).data
    half = -spec_cfg.db_floor / 2.0
    return (db + half) / half


def temporal_path(x: Tensor, p: dict[str, Tensor], enc: EncoderConfig, mode: str, slope: float) -> Tensor:
    # a single window cannot supply batch statistics; fall back to running stats
    bn_mode = "eval" if mode == "eval" or x.shape[-3] < 2 else "train"
    h = ad.batchnorm1d(x, p["bn.gamma"], p["bn.beta"], p["bn.running_mean"], p["bn.running_var"], bn_mode)
    for i, (_, k) in enumerate(enc.temporal):
        h = _residual_block(h, p, i, k, slope)
    h = ad.maxpool1d(h, enc.pool, enc.pool)
    return _flatten_tail(h, 2)


def spectral_path(
    rows: np.ndarray, p: dict[str, Tensor], enc: EncoderConfig, mode: str, rng, hp: HyperParams
) -> Tensor:
    s = Tensor(spectral_input(rows, enc.spec_cfg))
    for i in range(len(enc.spectral)):
        s = ad.leaky_relu(ad.conv2d(s, p[f"s{i}.weight"], p[f"s{i}.bias"], 1, 1), hp.leaky_slope)
    s = ad.dense(_flatten_tail(s, 3), p["spec_dense.weight"], p["spec_dense.bias"])
    s = ad.leaky_relu(s, hp.leaky_slope)
    return ad.dropout(s, hp.dropout_rate, rng, mode)


def _encode(X: np.ndarray, p: dict[str, Tensor], enc: EncoderConfig, mode, rng, hp) -> Tensor:
    """X is [..., n, C, L]; leading dims must match the leading dims of ``p``."""
    if X.shape[-1] != enc.window_len:
        raise FrequencyMismatchError(
            f"window of {X.shape[-1]} samples does not fit the {enc.fs:g} Hz branch "
            f"({enc.window_len} samples)"
        )
    t = temporal_path(Tensor(X), p, enc, mode, hp.leaky_slope)
    s = spectral_path(X, p, enc, mode, rng, hp)
    z = ad.dense(ad.concat([t, s], axis=-1), p["proj.weight"], p["proj.bias"])
    return ad.leaky_relu(z, hp.leaky_slope)


def encode_channel(
    rows,
    branch: dict[str, Tensor],
    enc: EncoderConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    hp: HyperParams | None = None,
) -> Tensor:
    """Latent code for a batch of single-sensor windows ``rows`` [n, C, L].

    A 2-D [C, L] input is treated as a batch of one and returns [latent_dim].
    """
    hp = hp or HyperParams()
    arr = rows.data if isinstance(rows, Tensor) else np.asarray(rows, dtype=np.float64)
    single = arr.ndim == 2
    z = _encode(arr[None] if single else arr, branch, enc, mode, rng, hp)
    return ad.reshape(z, (-1,)) if single else z


def _encode_group(X: np.ndarray, branches: list[dict[str, Tensor]], enc, mode, rng, hp) -> Tensor:
    """Run several same-shaped encoders at once on X [S, n, C, L] -> [S, n, latent]."""
    if len(branches) == 1:
        return ad.reshape(_encode(X[0], branches[0], enc, mode, rng, hp), (1,) + (X.shape[1], -1))
    stacked = {n: ad.stack([b[n] for b in branches]) for n in branches[0]}
    z = _encode(X, stacked, enc, mode, rng, hp)
    for name in ("bn.running_mean", "bn.running_var"):
        for i, b in enumerate(branches):
            b[name].data = stacked[name].data[i].copy()
    return z


def apply_context(latents, context) -> Tensor:
    """Concatenate latents after multiplying slot i by ``context[..., i]``.

    ``latents`` is a list of [latent_dim] (or [n, latent_dim]) tensors, or a
    stacked [S, n, latent_dim] tensor; ``context`` is one bit per slot, or
    [n, S] for batched latents. Output is slot-major along the last axis.
    """
    ctx = np.asarray(context, dtype=np.float64)
    n_slots = latents.shape[0] if isinstance(latents, Tensor) else len(latents)
    if ctx.shape[-1] != n_slots:
        raise DimensionError(f"{n_slots} latents but context of length {ctx.shape[-1]}")
    if isinstance(latents, Tensor):
        S, n, d = latents.shape
        mask = (ctx.T if ctx.ndim > 1 else np.broadcast_to(ctx[:, None], (S, n)))[..., None]
        # + 0.0 turns -0.0 into +0.0 so masked slots are bitwise zero
        z = ad.add(ad.mul(latents, mask), 0.0)
        return ad.reshape(ad.transpose(z, (1, 0, 2)), (n, S * d))
    parts = []
    for i, z in enumerate(latents):
        c = ctx[..., i : i + 1] if ctx.ndim > 1 else ctx[i]
        parts.append(ad.add(ad.mul(z, c), 0.0))
    return ad.concat(parts, axis=-1)


def _slot_context(cfg: ModelConfig, ctx: np.ndarray) -> np.ndarray:
    idx = [sensor for _, sensor, _ in cfg.slots()]
    return ctx[:, idx]


def compute_logits(
    batch: Sequence[SensorWindow],
    params: ParamTree,
    cfg: ModelConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, list[str]]:
    """Logits [n, n_classes] and the branch keys the batch exercised."""
    hp = cfg.hp
    groups: dict[float, list[int]] = {}
    for i, w in enumerate(batch):
        groups.setdefault(float(w.fs), []).append(i)
    parts, order, used = [], [], []
    slots = cfg.slots()
    for fs in sorted(groups):
        if fs not in cfg.frequencies:
            raise FrequencyMismatchError(f"no encoder branch configured for {fs:g} Hz")
        idx = groups[fs]
        enc = cfg.encoder_config(fs)
        X = np.stack([batch[i].data for i in idx])
        if X.shape[-1] != enc.window_len:
            raise FrequencyMismatchError(
                f"{fs:g} Hz windows have {X.shape[-1]} samples, branch expects {enc.window_len}"
            )
        ctx = _slot_context(cfg, np.stack([np.asarray(batch[i].context, dtype=np.float64) for i in idx]))
        keys = [branch_key(fs, name) for name, _, _ in slots]
        Xs = np.stack([X[:, rows, :] for _, _, rows in slots])
        z = _encode_group(Xs, [params[k] for k in keys], enc, mode, rng, hp)
        parts.append(apply_context(z, ctx))
        order.extend(idx)
        used.extend(keys)
    z = parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)
    order = np.asarray(order)
    if not np.array_equal(order, np.arange(len(order))):
        z = ad.take_rows(z, np.argsort(order, kind="stable"))
    head = params[HEAD]
    h = ad.leaky_relu(ad.dense(z, head["fc1.weight"], head["fc1.bias"]), hp.leaky_slope)
    h = ad.dropout(h, hp.dropout_rate, rng, mode)
    logits = ad.dense(h, head["fc2.weight"], head["fc2.bias"])
    used.append(HEAD)
    return logits, used


def forward(
    batch: Sequence[SensorWindow],
    params: ParamTree,
    cfg: ModelConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> Tensor:
    logits, _ = compute_logits(batch, params, cfg, mode, rng)
    return ad.softmax(logits)


def predict_proba(
    windows: Sequence[SensorWindow], params: ParamTree, cfg: ModelConfig, chunk: int = 512
) -> np.ndarray:
    if not windows:
        return np.zeros((0, cfg.n_classes))
    out = []
    with ad.no_grad():
        for lo in range(0, len(windows), chunk):
            out.append(forward(windows[lo : lo + chunk], params, cfg, "eval").data)
    return np.concatenate(out)


def dense_weights(params: ParamTree, keys: Sequence[str]) -> list[Tensor]:
    return [t for k in keys for n, t in params[k].items() if n in _DENSE_WEIGHTS]


def train_step(
    batch: Sequence[SensorWindow],
    params: ParamTree,
    opt_state: AdamState,
    cfg: ModelConfig,
    rng: np.random.Generator,
) -> tuple[ParamTree, AdamState, float]:
    """One Adam step on ``batch``. ``params`` and ``opt_state`` are updated and returned."""
    if not batch:
        raise ValueError("empty batch")
    logits, used = compute_logits(batch, params, cfg, "train", rng)
    labels = np.array([w.label for w in batch])
    loss = ad.cross_entropy_loss(logits, labels, cfg.hp.l2_rate, dense_weights(params, used))
    loss.backward()
    leaves = params.flat(used)
    grads = {n: t.grad for n, t in leaves.items() if t.grad is not None}
    ad.adam_step(leaves, grads, opt_state, cfg.hp)
    for t in leaves.values():
        t.grad = None
    return params, opt_state, float(loss.data)


def exercised_keys(windows: Sequence[SensorWindow], cfg: ModelConfig) -> set[str]:
    keys = {HEAD} if windows else set()
    for fs in {float(w.fs) for w in windows}:
        keys.update(cfg.branch_keys(fs))
    return keys


# ---------------------------------------------------------------------------
# binary format: magic, version, leaf table, float64 little-endian payload

MAGIC = b"MFST"
VERSION = 1


def serialize(params: ParamTree) -> bytes:
    head = [MAGIC, struct.pack("<BI", VERSION, sum(1 for _ in params.leaves()))]
    payload = []
    for k, n, t in params.leaves():
        name = f"{k}/{n}".encode("utf-8")
        head.append(struct.pack("<H", len(name)) + name)
        head.append(struct.pack("<BB", int(t.requires_grad), t.data.ndim))
        head.append(struct.pack(f"<{t.data.ndim}I", *t.shape))
        payload.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(head + payload)


def header_size(params: ParamTree) -> int:
    size = len(MAGIC) + 5
    for k, n, t in params.leaves():
        size += 2 + len(f"{k}/{n}".encode("utf-8")) + 2 + 4 * t.data.ndim
    return size


def deserialize(blob: bytes) -> ParamTree:
    def need(off: int, n: int, what: str):
        if off + n > len(blob):
            raise ParamFormatError(f"truncated while reading {what}", off)

    need(0, 9, "header")
    if blob[:4] != MAGIC:
        raise ParamFormatError("bad magic bytes", 0)
    version, count = struct.unpack_from("<BI", blob, 4)
    if version != VERSION:
        raise ParamFormatError(f"unsupported version {version}", 4)
    off = 9
    table = []
    for _ in range(count):
        need(off, 2, "leaf name length")
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        need(off, nlen, "leaf name")
        try:
            name = blob[off : off + nlen].decode("utf-8")
        except UnicodeDecodeError:
            raise ParamFormatError("leaf name is not UTF-8", off) from None
        off += nlen
        need(off, 2, f"shape of {name!r}")
        flag, ndim = struct.unpack_from("<BB", blob, off)
        off += 2
        need(off, 4 * ndim, f"shape of {name!r}")
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        if "/" not in name:
            raise ParamFormatError(f"leaf name {name!r} lacks a branch prefix", off)
        table.append((name, bool(flag), shape))
    branches: dict[str, dict[str, Tensor]] = {}
    for name, flag, shape in table:
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if off + nbytes > len(blob):
            raise ParamFormatError(f"payload truncated: missing data for leaf {name!r}", off)
        arr = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=off).astype(np.float64)
        off += nbytes
        k, n = name.split("/", 1)
        branches.setdefault(k, {})[n] = Tensor(arr.reshape(shape), flag)
    if off != len(blob):
        raise ParamFormatError(f"{len(blob) - off} trailing bytes", off)
    return ParamTree(branches)


def infer_config(params: ParamTree, sensors: Sequence[SensorSpec], hp: HyperParams | None = None) -> ModelConfig:
    """Rebuild the ModelConfig that produced ``params`` (layer widths come from leaf shapes)."""
    enc_keys = [k for k in params.keys() if k != HEAD]
    if not enc_keys or HEAD not in params:
        raise ParamFormatError("parameter tree lacks encoder branches or a head", 0)
    freqs = sorted({float(k.split("Hz:", 1)[0]) for k in enc_keys})
    slot_names = {k.split(":", 1)[1] for k in enc_keys}
    granularity = "sensor" if slot_names <= {s.name for s in sensors} else "axis"
    p = params[enc_keys[0]]
    temporal = tuple(p[f"t{i}.conv1.weight"].shape[0] for i in range(4))
    cfg = ModelConfig(
        frequencies=tuple(freqs),
        sensors=tuple(sensors),
        n_classes=params[HEAD]["fc2.weight"].shape[1],
        hp=hp or HyperParams(),
        temporal_channels=temporal,
        kernel_size=p["t0.conv1.weight"].shape[-1],
        spectral_channels=tuple(p[f"s{i}.weight"].shape[0] for i in range(3)),
        spectral_units=p["spec_dense.weight"].shape[1],
        latent_dim=p["proj.weight"].shape[1],
        head_units=params[HEAD]["fc1.weight"].shape[1],
        granularity=granularity,
    )
    if sorted(cfg.branch_keys() + [HEAD]) != sorted(params.keys()):
        raise ParamFormatError("branch keys do not match the declared sensors", 0)
    return cfg
