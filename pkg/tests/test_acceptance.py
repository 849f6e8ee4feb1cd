"""Acceptance suite.

Each test checks one numbered criterion and records a verdict line, which
``conftest.py`` prints in the terminal summary. Wall-clock budgets are part
of the verdict.
"""
import json
import math
import shutil
import time
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

import test_autodiff as TA
import test_dsp as TD
import test_fed as TF
import test_harness as TH
import test_model as TM
from conftest import ACCEPTANCE
from fedfreq import cli
from fedfreq import harness as H

ACCEPTANCE_CFG = Path(__file__).resolve().parents[1] / "configs" / "acceptance_5_40.cfg"
SEEDS = range(5)
LN7 = math.log(7)

_clock: dict[str, float] = {}


@contextmanager
def criterion(n: int, title: str, budget: float | None):
    """Time the body and record PASS/FAIL; budget overruns fail too."""
    info = {"detail": ""}
    t0 = time.perf_counter()
    ok, err = False, ""
    try:
        yield info
        ok = True
    except Exception as exc:
        err = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        raise
    finally:
        dt = info.get("seconds", time.perf_counter() - t0)
        in_budget = budget is None or dt < budget
        verdict = "PASS" if ok and in_budget else "FAIL"
        limit = f" / {budget:.0f} s" if budget else ""
        note = info["detail"] + (f" | {err}" if err else "") + ("" if in_budget else " | over budget")
        ACCEPTANCE[n] = f"criterion {n} {title}: {verdict} [{dt:.1f} s{limit}] {note}"
    assert in_budget, ACCEPTANCE[n]


def _cases(fn, n):
    for case in range(n):
        fn(case)


# ---------------------------------------------------------------------------
# 1-4: exactness properties


def test_criterion_1_gradients():
    grads = [
        TA.test_grad_conv1d, TA.test_grad_conv2d, TA.test_grad_grouped_conv, TA.test_grad_maxpool,
        TA.test_grad_batchnorm, TA.test_grad_dense_and_activations, TA.test_grad_dropout,
        TA.test_grad_cross_entropy, TA.test_grad_structural, TM.test_full_model_gradient,
    ]
    with criterion(1, "gradient correctness", 120) as info:
        for fn in grads:
            _cases(fn, 50)
        info["detail"] = f"{len(grads)} checks x 50 cases, rel err < 1e-4"


def test_criterion_2_forward_oracles():
    with criterion(2, "forward oracles", 60) as info:
        _cases(TA.test_conv1d_matches_loops, TA.N_FWD)
        _cases(TA.test_conv2d_matches_loops, TA.N_FWD)
        for fs in (3, 5, 40):
            for case in range(8):
                TD.test_stft_matches_naive_dft(fs, case)
        _cases(TH.test_metrics_match_oracle, 100)
        info["detail"] = f"conv {TA.N_FWD}+{TA.N_FWD} cases, stft 24, metrics 100"


def test_criterion_3_aggregation():
    with criterion(3, "aggregation properties", 60) as info:
        TF.test_aggregate_single_update_is_identity()
        TF.test_aggregate_quarter_three_quarters()
        TF.test_aggregation_properties()
        TF.test_weights_are_exact_fractions()
        TF.test_coverage_aware_mixed_rates()
        TF.test_uncovered_keys_keep_previous()
        for seed in (0, 7, 123):
            TF.test_single_client_fedavg_equals_centralized_epoch(seed)
        info["detail"] = "brute force, permutation, scaling, coverage, single client == centralized"


def test_criterion_4_masking():
    with criterion(4, "masking invariance", 60) as info:
        TM.test_masking_invariance()
        info["detail"] = "100 trials, bit-identical probabilities"


# ---------------------------------------------------------------------------
# 5, 6, 9: scaled matrix on the acceptance dataset


@pytest.fixture(scope="module")
def acc_cfg():
    return H.ExperimentConfig.from_file(ACCEPTANCE_CFG)


@pytest.fixture(scope="module")
def matrix_runs(acc_cfg):
    t0 = time.perf_counter()
    runs = {s: H.run_matrix(replace(acc_cfg, seed=s, mode="centralized")) for s in SEEDS}
    _clock["matrix"] = time.perf_counter() - t0
    return runs


@pytest.fixture(scope="module")
def federated_run(acc_cfg):
    t0 = time.perf_counter()
    run = H.run_matrix(replace(acc_cfg, seed=0), ("ideal-high",), mode="federated")
    _clock["federated"] = time.perf_counter() - t0
    return run


def _f1(run) -> dict[str, float]:
    return {r.config: r.fold_mean_f1 for r in run.rows}


def test_criterion_5_multi_frequency_advantage(matrix_runs):
    with criterion(5, "multi-frequency advantage", 1200) as info:
        info["seconds"] = _clock["matrix"]
        per_seed = [_f1(matrix_runs[s]) for s in SEEDS]
        med = {k: float(np.median([p[k] for p in per_seed])) for k in H.MATRIX_ROWS}
        info["detail"] = " ".join(f"{k}={v:.4f}" for k, v in med.items())
        assert med["multi@low"] > med["low-only"], "multi@low does not beat low-only"
        assert med["multi@high"] > med["high-only"], "multi@high does not beat high-only"
        assert med["ideal-high"] >= med["multi@high"] - 0.03, "ideal-high more than 3 points below multi@high"


def test_criterion_6_federated_close_to_centralized(matrix_runs, federated_run):
    with criterion(6, "federated vs centralized", 1200) as info:
        # shares the 20 minute budget with criterion 5
        info["seconds"] = _clock["matrix"] + _clock["federated"]
        fed = _f1(federated_run)["ideal-high"]
        cen = _f1(matrix_runs[0])["ideal-high"]
        info["detail"] = f"federated={fed:.4f} centralized={cen:.4f} gap={abs(fed - cen) * 100:.2f} points"
        assert abs(fed - cen) < 0.05, "gap of 5 points or more"


def test_criterion_9_trained_ce(matrix_runs, federated_run):
    with criterion(9, "trained-model CE", None) as info:
        ces = [(s, r.config, r.fold_mean_ce) for s in SEEDS for r in matrix_runs[s].rows]
        ces += [(0, "federated ideal-high", r.fold_mean_ce) for r in federated_run.rows]
        worst = max(ces, key=lambda t: t[2])
        info["detail"] = f"worst fold-mean CE {worst[2]:.4f} ({worst[1]}, seed {worst[0]}) vs ln 7 = {LN7:.4f}"
        assert worst[2] < LN7, "a trained model does not beat the uniform predictor"


# ---------------------------------------------------------------------------
# 7: participant ablation


def non_decreasing(values, tol=0.01) -> bool:
    """At most one drop between consecutive values, and no drop larger than ``tol``."""
    drops = [a - b for a, b in zip(values, values[1:]) if b < a]
    return len(drops) <= 1 and all(d <= tol for d in drops)


def test_non_decreasing_helper():
    assert non_decreasing([0.5, 0.6, 0.6, 0.7])
    assert non_decreasing([0.5, 0.6, 0.595, 0.7])
    assert not non_decreasing([0.5, 0.6, 0.58, 0.7])
    assert not non_decreasing([0.5, 0.6, 0.595, 0.7, 0.695])


def test_criterion_7_participant_ablation(acc_cfg):
    with criterion(7, "participant ablation trend", 900) as info:
        runs = [H.run_participant_ablation(replace(acc_cfg, seed=s)) for s in SEEDS]
        counts = list(acc_cfg.ablation_counts)
        parts, ok = [], True
        for mode in ("federated", "centralized"):
            med = [
                float(np.median([r.fold_mean_f1 for run in runs for r in run.rows if r.mode == mode and r.n_participants == n]))
                for n in counts
            ]
            ok &= non_decreasing(med)
            parts.append(f"{mode} " + " ".join(f"{n}:{m:.4f}" for n, m in zip(counts, med)))
        info["detail"] = " | ".join(parts)
        assert ok, "median macro-F1 not non-decreasing in participant count"


# ---------------------------------------------------------------------------
# 8: reproducibility through the command line


def _snapshot(directory: Path) -> dict[str, bytes]:
    return {str(p.relative_to(directory)): p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file()}


def _twice(argv, out_dir: Path, capsys):
    """Run a command, wipe its output, run it again; return both (stdout, files) pairs."""
    seen = []
    for _ in range(2):
        shutil.rmtree(out_dir, ignore_errors=True)
        code = cli.main(argv)
        out = capsys.readouterr().out
        assert code == 0, f"{argv[0]} exited with {code}"
        seen.append((out, _snapshot(out_dir) if out_dir.exists() else {}))
    return seen


def test_criterion_8_cli_reproducible(tmp_path, capsys):
    with criterion(8, "CLI determinism", None) as info:
        cfg = tmp_path / "tiny.cfg"
        cfg.write_text(TH.TINY_INI, encoding="utf-8")
        data = tmp_path / "data"
        csv_cfg = tmp_path / "csv.cfg"
        csv_cfg.write_text(TH.TINY_INI.replace("[data]\n", f"[data]\nsource = {data / 'manifest.ini'}\n"))
        commands = [
            (["gen-synth", "--config", str(cfg), "--out-dir", str(data)], data),
            (["ingest", "--config", str(csv_cfg), "--out-dir", str(tmp_path / "ing")], tmp_path / "ing"),
            (["train-central", "--config", str(cfg), "--out-dir", str(tmp_path / "tc"), "--variant", "multi"], tmp_path / "tc"),
            (["train-fed", "--config", str(cfg), "--out-dir", str(tmp_path / "tf")], tmp_path / "tf"),
            (["run-matrix", "--config", str(cfg), "--out-dir", str(tmp_path / "rm")], tmp_path / "rm"),
            (["ablate-participants", "--config", str(cfg), "--out-dir", str(tmp_path / "ab")], tmp_path / "ab"),
        ]
        n_files = 0
        for argv, out_dir in commands:
            (a_out, a_files), (b_out, b_files) = _twice(argv, out_dir, capsys)
            assert a_out == b_out and a_files == b_files, f"{argv[0]} output differs between runs"
            n_files += len(a_files)
        ckpt = json.loads(cli_json(["train-central", "--config", str(cfg), "--out-dir", str(tmp_path / "tc"),
                                    "--variant", "multi"], capsys))["checkpoint"]
        ev = ["evaluate", "--config", str(cfg), "--checkpoint", ckpt, "--data", str(data / "p00.csv"), "--fs", "5"]
        assert cli_json(ev, capsys) == cli_json(ev, capsys), "evaluate output differs between runs"
        info["detail"] = f"{len(commands) + 1} commands, {n_files} files byte-identical across reruns"


def cli_json(argv, capsys) -> str:
    assert cli.main(argv) == 0
    return capsys.readouterr().out
