"""Windowing, log-amplitude spectrograms and integer-ratio decimation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import firwin

from .autodiff import DimensionError, Tensor

FIR_TAPS = 31
DB_FLOOR = -80.0


class UnsupportedRatioError(ValueError):
    pass


@dataclass
class RawStream:
    """Synchronously sampled channels with one label per sample.

    ``channels`` is [n_channels, n_samples]; channel names follow the
    ``<sensor>_<axis>`` convention so sensors can be recovered by prefix.
    """

    channels: np.ndarray
    fs: float
    labels: np.ndarray
    channel_names: list[str]
    timestamps: np.ndarray | None = None

    def __post_init__(self):
        self.channels = np.atleast_2d(np.asarray(self.channels, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.channels.shape[1] != self.labels.shape[0]:
            raise DimensionError(
                f"{self.channels.shape[1]} samples per channel but {self.labels.shape[0]} labels"
            )
        if len(self.channel_names) != self.channels.shape[0]:
            raise DimensionError("one name per channel required")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def sensor_names(self) -> list[str]:
        names: list[str] = []
        for ch in self.channel_names:
            s = ch.rsplit("_", 1)[0]
            if s not in names:
                names.append(s)
        return names


@dataclass
class SensorWindow:
    data: np.ndarray  # [rows, window_len]
    fs: float
    label: int
    context: np.ndarray  # one 0/1 entry per sensor
    participant: str = ""
    start: int = 0
    meta: dict = field(default_factory=dict, repr=False)

    @property
    def window_len(self) -> int:
        return int(self.data.shape[1])


@dataclass(frozen=True)
class SpectrogramConfig:
    win_len: int
    hop: int
    nfft: int
    db_floor: float = DB_FLOOR

    def __post_init__(self):
        if self.win_len > self.nfft:
            raise ValueError("win_len must not exceed nfft")
        if self.hop < 1 or self.win_len < 1:
            raise ValueError("hop and win_len must be positive")

    @property
    def n_bins(self) -> int:
        return self.nfft // 2 + 1

    def n_frames(self, length: int) -> int:
        return (length - self.win_len) // self.hop + 1


_DEFAULT_SPEC = {
    40: SpectrogramConfig(16, 8, 16),
    5: SpectrogramConfig(8, 2, 8),
    3: SpectrogramConfig(4, 2, 8),
}


def default_spectrogram_config(fs: float) -> SpectrogramConfig:
    if fs in _DEFAULT_SPEC:
        return _DEFAULT_SPEC[int(fs)]
    # ~0.4 s analysis window rounded to a power of two, half overlap
    win = max(4, 2 ** int(round(np.log2(max(fs * 0.4, 1.0)))))
    return SpectrogramConfig(win, max(1, win // 2), win)


def window_stream(stream: RawStream, window_seconds: float, overlap: float) -> list[SensorWindow]:
    if not 0.0 <= overlap < 1.0:
        raise ValueError("overlap must lie in [0, 1)")
    w = int(round(window_seconds * stream.fs))
    step = max(1, int(round(w * (1.0 - overlap))))
    n = len(stream)
    if w < 1 or n < w:
        return []
    count = (n - w) // step + 1
    n_sensors = len(stream.sensor_names)
    out = []
    for i in range(count):
        lo = i * step
        counts = np.bincount(stream.labels[lo : lo + w])
        out.append(
            SensorWindow(
                data=stream.channels[:, lo : lo + w].copy(),
                fs=stream.fs,
                label=int(counts.argmax()),  # argmax picks the lowest id on ties
                context=np.ones(n_sensors),
                start=lo,
            )
        )
    return out


def stft_magnitude(signal: np.ndarray, cfg: SpectrogramConfig) -> np.ndarray:
    """|STFT| with a periodic Hann window; returns [..., n_bins, n_frames]."""
    signal = np.asarray(signal, dtype=np.float64)
    if signal.shape[-1] < cfg.win_len:
        raise DimensionError(f"signal of length {signal.shape[-1]} shorter than window {cfg.win_len}")
    frames = np.lib.stride_tricks.sliding_window_view(signal, cfg.win_len, axis=-1)[..., :: cfg.hop, :]
    spec = np.fft.rfft(frames * hann(cfg.win_len), n=cfg.nfft, axis=-1)
    return np.swapaxes(np.abs(spec), -1, -2)


def hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def log_amp_spectrogram(signal, cfg: SpectrogramConfig) -> Tensor:
    mag = stft_magnitude(signal, cfg)
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(mag)
    return Tensor(np.maximum(db, cfg.db_floor))


def lowpass_taps(from_fs: float, to_fs: float, taps: int = FIR_TAPS) -> np.ndarray:
    # Hamming-windowed sinc normalised to unit DC gain
    return firwin(taps, 0.5 * to_fs, window="hamming", fs=from_fs)


def _ratio(from_fs: float, to_fs: float) -> int:
    if to_fs <= 0 or from_fs <= 0:
        raise UnsupportedRatioError("sampling rates must be positive")
    r = from_fs / to_fs
    if r < 1 or abs(r - round(r)) > 1e-9:
        raise UnsupportedRatioError(f"{from_fs} Hz -> {to_fs} Hz is not an integer decimation")
    return int(round(r))


def downsample(signal, from_fs: float, to_fs: float) -> np.ndarray:
    """Zero-phase anti-alias FIR along the last axis, then keep every r-th sample."""
    x = np.asarray(signal, dtype=np.float64)
    r = _ratio(from_fs, to_fs)
    if r == 1:
        return x.copy()
    h = lowpass_taps(from_fs, to_fs)
    half = len(h) // 2
    if x.shape[-1] <= half:
        raise DimensionError(f"signal of length {x.shape[-1]} too short for {len(h)}-tap filter")
    pad = [(0, 0)] * (x.ndim - 1) + [(half, half)]
    xp = np.pad(x, pad, mode="reflect")
    win = np.lib.stride_tricks.sliding_window_view(xp, len(h), axis=-1)
    y = win @ h[::-1]
    return y[..., ::r]


def decimation_stages(from_fs: float, to_fs: float) -> list[int]:
    """Split an integer ratio into stages: odd primes first, then factors of two
    grouped up to 8 (so 120->5 Hz runs 120->40->5)."""
    r = _ratio(from_fs, to_fs)
    odd, twos, p = [], 1, 3
    while r % 2 == 0:
        twos *= 2
        r //= 2
    while r > 1:
        while r % p == 0:
            odd.append(p)
            r //= p
        p += 2
    chunks = []
    while twos > 1:
        c = min(twos, 8)
        chunks.append(c)
        twos //= c
    return odd + chunks


def decimate(signal, from_fs: float, to_fs: float) -> np.ndarray:
    """Multi-stage ``downsample``; each stage keeps the 31-tap filter usable."""
    x = np.asarray(signal, dtype=np.float64)
    fs = from_fs
    for s in decimation_stages(from_fs, to_fs):
        x = downsample(x, fs, fs / s)
        fs = fs / s
    return x.copy() if fs == from_fs else x
