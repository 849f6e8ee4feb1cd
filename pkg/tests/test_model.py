import math

import numpy as np
import pytest

from fedfreq import autodiff as ad
from fedfreq import model as M
from fedfreq.autodiff import AdamState, HyperParams, Tensor
from fedfreq.data import SynthSpec, build_client_windows, gen_synthetic
from fedfreq.dsp import SensorWindow
from oracles import maxpool_naive

TINY = dict(
    temporal_channels=(2, 2, 3, 3),
    spectral_channels=(2, 2, 2),
    spectral_units=4,
    latent_dim=4,
    head_units=6,
)


def tiny_cfg(freqs=(5, 40), sensors=("acc", "gyr"), dropout=0.0, lr=1e-3, **kw):
    hp = HyperParams(learning_rate=lr, dropout_rate=dropout, batch_size=8)
    return M.ModelConfig(tuple(freqs), tuple(M.SensorSpec(s) for s in sensors), hp=hp, **{**TINY, **kw})


def make_windows(cfg, n, fs, rng, context=None, labels=None):
    rows = cfg.n_rows
    L = int(round(cfg.window_seconds * fs))
    out = []
    for i in range(n):
        ctx = np.ones(len(cfg.sensors)) if context is None else np.asarray(context, float)
        data = rng.normal(size=(rows, L))
        label = int(rng.integers(cfg.n_classes)) if labels is None else int(labels[i])
        out.append(SensorWindow(data, fs, label, ctx.copy()))
    return out


# ---------------------------------------------------------------------------
# structure


def _hand_count():
    """Trainable parameters of the default two-sensor 5/40 Hz model, by hand."""
    def encoder(L, bins, frames):
        n = 3 + 3  # bn gamma/beta
        n += (16 * 3 * 3 + 16) + (16 * 16 * 3 + 16) + (3 * 16 + 16)  # block 0 with 1x1 skip
        n += (16 * 16 * 3 + 16) * 2  # block 1
        n += (32 * 16 * 3 + 32) + (32 * 32 * 3 + 32) + (16 * 32 + 32)  # block 2 with skip
        n += (32 * 32 * 3 + 32) * 2  # block 3
        n += (8 * 3 * 9 + 8) + (16 * 8 * 9 + 16) + (16 * 16 * 9 + 16)
        n += 16 * bins * frames * 64 + 64
        n += (32 * (L // 2) + 64) * 64 + 64
        return n

    per40 = encoder(80, 9, 9)  # 16-sample frames, hop 8 -> 9 frames
    per5 = encoder(10, 5, 2)  # 8-sample frames, hop 2 -> 2 frames
    head = (2 * 64 * 128 + 128) + (128 * 7 + 7)
    return 2 * (per40 + per5) + head


def test_param_count_default_config():
    cfg = M.ModelConfig((5, 40))
    assert _hand_count() == 475871
    assert M.expected_param_count(cfg) == 475871
    assert M.init_params(cfg, 0).num_params() == 475871


@pytest.mark.parametrize("freqs", [(40,), (3, 40), (5, 40), (3, 5, 40)])
@pytest.mark.parametrize("gran", ["sensor", "axis"])
def test_param_count_is_closed_form(freqs, gran):
    cfg = tiny_cfg(freqs, granularity=gran)
    p = M.init_params(cfg, 1)
    assert p.num_params() == M.expected_param_count(cfg)
    assert sorted(p.keys()) == sorted(cfg.branch_keys() + [M.HEAD])


def test_same_config_same_structure():
    cfg = tiny_cfg()
    a, b = M.init_params(cfg, 0), M.init_params(cfg, 99)
    assert a.structure() == b.structure()
    assert not a.bit_equal(b)
    assert a.bit_equal(M.init_params(cfg, 0))


def test_config_invariants():
    with pytest.raises(ValueError):
        M.ModelConfig((5,), n_classes=1)
    with pytest.raises(ValueError):
        M.ModelConfig(())
    with pytest.raises(ValueError):
        M.ModelConfig((5,), temporal_channels=(8, 8, 8))


# ---------------------------------------------------------------------------
# encoder


@pytest.mark.parametrize("fs", [3, 5, 40])
def test_encode_shape_and_determinism(fs):
    cfg = tiny_cfg((fs,))
    p = M.init_params(cfg, 0)
    enc = cfg.encoder_config(fs)
    rows = np.random.default_rng(fs).normal(size=(3, enc.window_len))
    z = M.encode_channel(rows, p[M.branch_key(fs, "acc")], enc, "eval")
    assert z.shape == (cfg.latent_dim,)
    z2 = M.encode_channel(rows.copy(), p[M.branch_key(fs, "acc")], enc, "eval")
    assert z.data.tobytes() == z2.data.tobytes()


def test_encode_frequency_mismatch():
    cfg = tiny_cfg((5, 40))
    p = M.init_params(cfg, 0)
    with pytest.raises(M.FrequencyMismatchError):
        M.encode_channel(np.zeros((3, 80)), p["5Hz:acc"], cfg.encoder_config(5))
    w = make_windows(cfg, 1, 3, np.random.default_rng(0))
    with pytest.raises(M.FrequencyMismatchError):
        M.forward(w, p, cfg)


def test_residual_blocks_reduce_to_identity():
    cfg = tiny_cfg((40,), temporal_channels=(3, 3, 3, 3))
    p = M.init_params(cfg, 0)["40Hz:acc"]
    for name, t in p.items():
        if name.startswith("t") and ".conv" in name:
            t.data = np.zeros_like(t.data)
    p["bn.gamma"].data = np.array([1.5, 0.5, 2.0])
    p["bn.beta"].data = np.array([0.1, -0.2, 0.0])
    enc = cfg.encoder_config(40)
    x = np.random.default_rng(3).normal(size=(4, 3, 80))
    got = M.temporal_path(Tensor(x), p, enc, "train", 0.01).data
    mu, var = x.mean(axis=(0, 2), keepdims=True), x.var(axis=(0, 2), keepdims=True)
    h = (x - mu) / np.sqrt(var + ad.BN_EPS) * p["bn.gamma"].data[:, None] + p["bn.beta"].data[:, None]
    for _ in range(4):
        h = np.where(h > 0, h, 0.01 * h)
    ref = maxpool_naive(h, 2, 2).reshape(4, -1)
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-14)


def test_apply_context():
    rng = np.random.default_rng(4)
    lat = [Tensor(rng.normal(size=4)) for _ in range(3)]
    full = M.apply_context(lat, [1, 1, 1]).data
    np.testing.assert_array_equal(full, np.concatenate([t.data for t in lat]))
    masked = M.apply_context(lat, [1, 0, 1]).data
    assert masked[4:8].tobytes() == np.zeros(4).tobytes()
    np.testing.assert_array_equal(masked[:4], lat[0].data)
    with pytest.raises(ad.DimensionError):
        M.apply_context(lat, [1, 0])
    stacked = Tensor(rng.normal(size=(3, 2, 4)))
    out = M.apply_context(stacked, np.array([[1, 0, 1], [0, 1, 1]])).data
    assert out.shape == (2, 12)
    assert out[0, 4:8].tobytes() == np.zeros(4).tobytes() and out[1, :4].tobytes() == np.zeros(4).tobytes()


# ---------------------------------------------------------------------------
# forward


def test_masking_invariance():
    cfg = tiny_cfg((5, 40))
    p = M.init_params(cfg, 5)
    rng = np.random.default_rng(5)
    for trial in range(100):
        fs = (5, 40)[trial % 2]
        masked = int(rng.integers(2))
        ctx = np.ones(2)
        ctx[masked] = 0
        base = make_windows(cfg, 3, fs, rng, context=ctx)
        for w in base:
            w.data[3 * masked : 3 * masked + 3] = 0.0
        noisy = [SensorWindow(w.data.copy(), w.fs, w.label, w.context.copy()) for w in base]
        for w in noisy:
            w.data[3 * masked : 3 * masked + 3] = rng.normal(scale=10.0, size=(3, w.window_len))
        a = M.predict_proba(base, p, cfg)
        b = M.predict_proba(noisy, p, cfg)
        assert a.tobytes() == b.tobytes()


def test_mixed_batch_rows_match_single_rate_batches():
    cfg = tiny_cfg((5, 40))
    p = M.init_params(cfg, 6)
    rng = np.random.default_rng(6)
    w5, w40 = make_windows(cfg, 3, 5, rng), make_windows(cfg, 2, 40, rng)
    mixed = [w5[0], w40[0], w5[1], w40[1], w5[2]]
    probs = M.forward(mixed, p, cfg).data
    assert probs.shape == (5, 7)
    assert np.all(probs >= 0) and np.allclose(probs.sum(1), 1.0, atol=1e-9)
    sep5, sep40 = M.forward(w5, p, cfg).data, M.forward(w40, p, cfg).data
    np.testing.assert_allclose(probs[[0, 2, 4]], sep5, rtol=1e-12)
    np.testing.assert_allclose(probs[[1, 3]], sep40, rtol=1e-12)


def test_untrained_model_is_at_chance():
    spec = SynthSpec(n_participants=2, seconds_per_class=60.0)
    streams = gen_synthetic(spec, 0)
    wins = [w for pid, s in streams.items() for w in build_client_windows(s, 40, participant=pid)]
    by_class = {c: [w for w in wins if w.label == c][:100] for c in range(7)}
    batch = [w for c in range(7) for w in by_class[c]]
    assert len(batch) == 700
    cfg = M.ModelConfig((40,), n_classes=7, **TINY)
    accs = []
    for seed in range(5):
        pred = M.predict_proba(batch, M.init_params(cfg, seed), cfg).argmax(1)
        accs.append(float(np.mean(pred == np.array([w.label for w in batch]))))
    sigma = math.sqrt((1 / 7) * (6 / 7) / 700)
    assert abs(float(np.mean(accs)) - 1 / 7) < 3 * sigma


# ---------------------------------------------------------------------------
# training


def test_branch_isolation():
    cfg = tiny_cfg((5, 40), dropout=0.3)
    p = M.init_params(cfg, 7)
    before = p.copy()
    rng = np.random.default_rng(7)
    state = AdamState()
    for _ in range(3):
        M.train_step(make_windows(cfg, 6, 5, rng), p, state, cfg, rng)
    keys40 = cfg.branch_keys(40)
    assert p.bit_equal(before, keys40)
    assert not p.bit_equal(before, cfg.branch_keys(5))
    assert not p.bit_equal(before, [M.HEAD])
    assert all(k.startswith("5Hz") or k == M.HEAD for k in {n.split("/")[0] for n in state.step})
    assert M.exercised_keys(make_windows(cfg, 1, 5, rng), cfg) == set(cfg.branch_keys(5)) | {M.HEAD}


def test_overfit_single_batch():
    cfg = tiny_cfg((5,), lr=1e-3)
    p = M.init_params(cfg, 8)
    rng = np.random.default_rng(8)
    batch = make_windows(cfg, 8, 5, rng)
    state = AdamState()
    losses = [M.train_step(batch, p, state, cfg, rng)[2] for _ in range(20)]
    assert all(b <= a for a, b in zip(losses, losses[1:])), losses
    assert losses[-1] < losses[0]


def test_training_is_deterministic():
    cfg = tiny_cfg((5, 40), dropout=0.5)
    results = []
    for _ in range(2):
        p = M.init_params(cfg, 9)
        rng = np.random.default_rng(9)
        data_rng = np.random.default_rng(10)
        state = AdamState()
        for _ in range(3):
            batch = make_windows(cfg, 4, 5, data_rng) + make_windows(cfg, 4, 40, data_rng)
            M.train_step(batch, p, state, cfg, rng)
        results.append(M.serialize(p))
    assert results[0] == results[1]


def test_empty_batch():
    cfg = tiny_cfg()
    with pytest.raises(ValueError):
        M.train_step([], M.init_params(cfg, 0), AdamState(), cfg, np.random.default_rng(0))


@pytest.mark.parametrize("case", range(50))
def test_full_model_gradient(case):
    rng = np.random.default_rng([40, case])
    fs = (5, 40)[case % 2]
    cfg = tiny_cfg((fs,), sensors=("acc",), dropout=0.25)
    p = M.init_params(cfg, case)
    batch = make_windows(cfg, 3, fs, rng)
    labels = np.array([w.label for w in batch])
    drop_seed = int(rng.integers(1 << 30))

    def loss_fn():
        logits, used = M.compute_logits(batch, p, cfg, "train", np.random.default_rng(drop_seed))
        return ad.cross_entropy_loss(logits, labels, 1e-2, M.dense_weights(p, used))

    loss_fn().backward()
    leaves = [(n, t) for n, t in p.flat().items() if t.requires_grad]
    picks = [leaves[i] for i in rng.choice(len(leaves), size=6, replace=False)]
    h = 1e-5
    for name, t in picks:
        idx = tuple(int(rng.integers(s)) for s in t.shape)
        old = t.data[idx]
        t.data[idx] = old + h
        fp = float(loss_fn().data)
        t.data[idx] = old - h
        fm = float(loss_fn().data)
        t.data[idx] = old
        num = (fp - fm) / (2 * h)
        ana = t.grad[idx]
        assert abs(ana - num) <= 1e-4 * max(abs(ana), abs(num), 1e-6), (name, idx, ana, num)
    # the whole head gradient at once, as a vector
    w = p[M.HEAD]["fc2.weight"]
    num = np.zeros_like(w.data)
    for idx in np.ndindex(w.shape):
        old = w.data[idx]
        w.data[idx] = old + h
        fp = float(loss_fn().data)
        w.data[idx] = old - h
        fm = float(loss_fn().data)
        w.data[idx] = old
        num[idx] = (fp - fm) / (2 * h)
    assert np.max(np.abs(w.grad - num)) <= 1e-4 * max(np.max(np.abs(num)), 1e-6)


# ---------------------------------------------------------------------------
# serialization


def test_serialize_round_trip_and_size():
    cfg = tiny_cfg((3, 5, 40))
    p = M.init_params(cfg, 11)
    blob = M.serialize(p)
    assert blob[:4] == b"MFST" and blob[4] == 1
    total = sum(t.data.size for _, _, t in p.leaves())
    assert len(blob) == M.header_size(p) + 8 * total
    q = M.deserialize(blob)
    assert q.bit_equal(p) and q.structure() == p.structure()
    assert [t.requires_grad for _, _, t in q.leaves()] == [t.requires_grad for _, _, t in p.leaves()]
    assert M.serialize(q) == blob


def test_deserialize_errors():
    p = M.init_params(tiny_cfg((5,)), 12)
    blob = M.serialize(p)
    last = list(p.flat())[-1]
    with pytest.raises(M.ParamFormatError, match=last.replace(".", r"\.")):
        M.deserialize(blob[:-8])
    with pytest.raises(M.ParamFormatError, match="magic"):
        M.deserialize(b"XXXX" + blob[4:])
    with pytest.raises(M.ParamFormatError, match="trailing"):
        M.deserialize(blob + b"\0")
    with pytest.raises(M.ParamFormatError) as exc:
        M.deserialize(blob[:20])
    assert exc.value.offset >= 9


def test_infer_config_round_trip():
    cfg = tiny_cfg((5, 40))
    p = M.init_params(cfg, 13)
    got = M.infer_config(M.deserialize(M.serialize(p)), cfg.sensors, cfg.hp)
    assert got == cfg
