import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedfreq import dsp
from fedfreq.autodiff import DimensionError
from fedfreq.dsp import RawStream, SpectrogramConfig
from oracles import dft_naive, hann_naive, rel_err, stft_naive


def _stream(n, fs, labels=None, rows=3, seed=0):
    rng = np.random.default_rng(seed)
    names = [f"acc_{a}" for a in "xyz"][:rows]
    return RawStream(rng.normal(size=(rows, n)), fs, np.zeros(n, int) if labels is None else labels, names)


# windowing


def test_window_counts():
    assert len(dsp.window_stream(_stream(50, 5), 2.0, 0.0)) == 5
    assert all(w.window_len == 10 for w in dsp.window_stream(_stream(50, 5), 2.0, 0.0))
    assert len(dsp.window_stream(_stream(50, 5), 2.0, 0.5)) == 9
    assert dsp.window_stream(_stream(9, 5), 2.0, 0.0) == []
    assert dsp.window_stream(_stream(0, 5), 2.0, 0.5) == []


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 400), st.sampled_from([3, 5, 40]), st.floats(0.5, 4.0), st.floats(0.0, 0.9))
def test_window_count_formula_and_offsets(n, fs, secs, overlap):
    s = _stream(n, fs)
    wins = dsp.window_stream(s, secs, overlap)
    w = int(round(secs * fs))
    step = max(1, int(round(w * (1 - overlap))))
    expected = (n - w) // step + 1 if w >= 1 and n >= w else 0
    assert len(wins) == expected
    for win in wins:
        np.testing.assert_array_equal(win.data, s.channels[:, win.start : win.start + w])


def test_majority_label_with_low_tie_break():
    labels = np.array([2] * 5 + [1] * 5 + [0] * 6 + [3] * 4)
    wins = dsp.window_stream(_stream(20, 5, labels), 2.0, 0.5)
    assert [w.label for w in wins] == [1, 0, 0]


def test_window_bad_overlap():
    with pytest.raises(ValueError):
        dsp.window_stream(_stream(20, 5), 2.0, 1.0)


# spectrogram


def test_hann_matches_closed_form():
    for n in (4, 8, 16):
        assert rel_err(dsp.hann(n), hann_naive(n)) < 1e-14


@pytest.mark.parametrize("fs", [3, 5, 40])
@pytest.mark.parametrize("case", range(8))
def test_stft_matches_naive_dft(fs, case):
    cfg = dsp.default_spectrogram_config(fs)
    x = np.random.default_rng([30, fs, case]).normal(size=int(2 * fs) + case)
    assert rel_err(dsp.stft_magnitude(x, cfg), stft_naive(x, cfg.win_len, cfg.hop, cfg.nfft)) < 1e-9


@pytest.mark.parametrize("fs", [3, 5, 40])
def test_parseval_per_frame(fs):
    cfg = dsp.default_spectrogram_config(fs)
    x = np.random.default_rng(fs).normal(size=int(2 * fs))
    mag = dsp.stft_magnitude(x, cfg)
    w = hann_naive(cfg.win_len)
    for t in range(mag.shape[1]):
        frame = x[t * cfg.hop : t * cfg.hop + cfg.win_len] * w
        full = np.abs(np.fft.fft(frame, cfg.nfft)) ** 2  # two-sided energy
        assert abs(full.sum() / cfg.nfft - np.sum(frame**2)) <= 1e-9 * np.sum(frame**2)
        # the one-sided magnitudes reproduce the same total once mirrored
        one = mag[:, t] ** 2
        mirrored = one[0] + 2 * one[1:-1].sum() + (one[-1] if cfg.nfft % 2 == 0 else 2 * one[-1])
        assert rel_err(mirrored / cfg.nfft, np.sum(frame**2)) < 1e-9


def test_spectrogram_zero_signal_is_floor():
    cfg = SpectrogramConfig(16, 8, 16)
    out = dsp.log_amp_spectrogram(np.zeros(80), cfg).data
    assert out.shape == (9, 9)
    assert np.all(out == cfg.db_floor)


@pytest.mark.parametrize("k", [1, 2, 3, 5, 7])
def test_sinusoid_peaks_at_its_bin(k):
    cfg = SpectrogramConfig(16, 8, 16)
    fs = 40.0
    t = np.arange(80) / fs
    x = np.sin(2 * np.pi * (k * fs / cfg.nfft) * t + 0.3)
    out = dsp.log_amp_spectrogram(x, cfg).data
    assert np.all(out.argmax(axis=0) == k)
    np.testing.assert_allclose(dft_naive(x[:16] * hann_naive(16), 16), dsp.stft_magnitude(x, cfg)[:, 0], rtol=1e-9, atol=1e-12)


def test_dc_energy_at_bin_zero():
    cfg = SpectrogramConfig(8, 2, 8)
    mag = dsp.stft_magnitude(np.full(10, 3.0), cfg)
    assert np.all(mag[0] >= mag[1:].max(axis=0))


def test_spectrogram_short_signal():
    with pytest.raises(DimensionError):
        dsp.log_amp_spectrogram(np.zeros(7), SpectrogramConfig(8, 2, 8))


def test_spectrogram_config_invariants():
    with pytest.raises(ValueError):
        SpectrogramConfig(16, 8, 8)
    with pytest.raises(ValueError):
        SpectrogramConfig(8, 0, 8)
    assert dsp.default_spectrogram_config(5).n_frames(10) == 2


# downsampling


def test_downsample_identity():
    x = np.random.default_rng(1).normal(size=30)
    y = dsp.downsample(x, 40, 40)
    np.testing.assert_array_equal(x, y)
    assert y is not x


def test_downsample_preserves_dc():
    y = dsp.downsample(np.full(400, 2.5), 40, 5)
    assert len(y) == 50
    np.testing.assert_allclose(y[3:-3], 2.5, rtol=1e-12)


@pytest.mark.parametrize("f", [4.0, 4.5, 6.0, 7.5, 9.0, 12.0, 17.0, 19.5])
def test_downsample_attenuates_stopband(f):
    t = np.arange(800) / 40.0
    x = np.sin(2 * np.pi * f * t + 0.1)
    y = dsp.downsample(x, 40, 5)[4:-4]
    assert 20 * np.log10(np.abs(y).max() / np.abs(x).max()) <= -20.0


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 2**31))
def test_downsample_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, 160))
    lhs = dsp.downsample(a * x + b * y, 40, 5)
    rhs = a * dsp.downsample(x, 40, 5) + b * dsp.downsample(y, 40, 5)
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * max(1.0, np.max(np.abs(rhs)))


def test_downsample_rank2_matches_rows():
    x = np.random.default_rng(2).normal(size=(3, 120))
    y = dsp.downsample(x, 120, 40)
    for i in range(3):
        np.testing.assert_array_equal(y[i], dsp.downsample(x[i], 120, 40))


@pytest.mark.parametrize("pair", [(40, 3), (40, 50), (5, 2), (0, 1)])
def test_unsupported_ratio(pair):
    with pytest.raises(dsp.UnsupportedRatioError):
        dsp.downsample(np.zeros(100), *pair)


def test_decimation_stages():
    assert dsp.decimation_stages(120, 5) == [3, 8]
    assert dsp.decimation_stages(120, 40) == [3]
    assert dsp.decimation_stages(120, 3) == [5, 8]
    assert dsp.decimation_stages(40, 40) == []
    assert dsp.decimation_stages(256, 1) == [8, 8, 4]
    x = np.random.default_rng(3).normal(size=1200)
    assert len(dsp.decimate(x, 120, 5)) == 50
    np.testing.assert_allclose(dsp.decimate(np.ones(1200), 120, 5)[3:-3], 1.0, rtol=1e-12)


def test_raw_stream_shape_checks():
    with pytest.raises(DimensionError):
        RawStream(np.zeros((2, 5)), 5, np.zeros(4, int), ["a_x", "a_y"])
    with pytest.raises(DimensionError):
        RawStream(np.zeros((2, 5)), 5, np.zeros(5, int), ["a_x"])
    s = RawStream(np.zeros((4, 5)), 5, np.zeros(5, int), ["acc_x", "acc_y", "gyr_x", "gyr_y"])
    assert s.sensor_names == ["acc", "gyr"]
