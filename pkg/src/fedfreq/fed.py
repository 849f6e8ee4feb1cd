"""Simulated federated training with coverage-aware weighted averaging."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .dsp import SensorWindow
from .metrics import MetricsReport, ce_sum, confusion_matrix, from_confusion
from .model import HEAD, ModelConfig, ParamTree, exercised_keys, init_params, predict_proba, serialize, train_step


class AggregationError(ValueError):
    pass


class TrainingConfigError(ValueError):
    pass


@dataclass
class ClientState:
    client_id: str
    dataset: list[SensorWindow]

    def __post_init__(self):
        rates = {float(w.fs) for w in self.dataset}
        if len(rates) > 1:
            raise ValueError(f"client {self.client_id!r} mixes sampling rates {sorted(rates)}")

    @property
    def n_samples(self) -> int:
        return len(self.dataset)

    @property
    def fs(self) -> float | None:
        return float(self.dataset[0].fs) if self.dataset else None


@dataclass
class ClientUpdate:
    client_id: str
    params: ParamTree
    n_samples: int
    trained_keys: set[str]

    def __post_init__(self):
        if not self.trained_keys <= set(self.params.keys()):
            raise AggregationError("trained_keys must be a subset of the parameter keys")
        if self.n_samples > 0 and HEAD not in self.trained_keys:
            raise AggregationError("a client with samples always trains the head")


@dataclass
class EvalSummary:
    """What a client reveals about its validation data: counts, not windows."""

    confusion: np.ndarray
    ce_sum: float


@dataclass
class RoundLog:
    round: int
    client_loss: dict[str, float]
    val_accuracy: float
    val_f1: float
    val_ce: float
    best: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _epoch(
    windows: Sequence[SensorWindow], params: ParamTree, state: ad.AdamState, cfg: ModelConfig, rng
) -> float:
    """One shuffled pass; returns the sample-weighted mean batch loss."""
    bs = cfg.hp.batch_size
    perm = rng.permutation(len(windows))
    total = 0.0
    for lo in range(0, len(perm), bs):
        batch = [windows[i] for i in perm[lo : lo + bs]]
        _, _, loss = train_step(batch, params, state, cfg, rng)
        total += loss * len(batch)
    return total / len(windows)


def local_train(
    client: ClientState, global_params: ParamTree, cfg: ModelConfig, seed: int = 0, round_idx: int = 0, rank: int = 0
) -> tuple[ClientUpdate, float] | None:
    """One local epoch from the broadcast weights with a fresh optimizer.

    Returns ``None`` (skip) for an empty client; otherwise the update and the
    mean training loss.
    """
    if client.n_samples == 0:
        return None
    params = global_params.copy()
    rng = np.random.default_rng([seed, round_idx, rank])
    loss = _epoch(client.dataset, params, ad.AdamState(), cfg, rng)
    keys = exercised_keys(client.dataset, cfg)
    return ClientUpdate(client.client_id, params, client.n_samples, keys), loss


def aggregation_weights(updates: Sequence[ClientUpdate], key: str) -> list[tuple[ClientUpdate, float]]:
    cover = sorted((u for u in updates if key in u.trained_keys and u.n_samples > 0), key=lambda u: u.client_id)
    total = sum(u.n_samples for u in cover)
    # exact rationals so that scaling every n_samples yields identical floats
    return [(u, float(Fraction(u.n_samples, total))) for u in cover]


def aggregate(updates: Sequence[ClientUpdate], previous: ParamTree | None = None) -> ParamTree:
    """Per-key weighted mean over the clients that trained that key.

    Keys no client trained keep ``previous`` (or the first update's) values.
    """
    if not updates:
        raise AggregationError("nothing to aggregate")
    ids = [u.client_id for u in updates]
    if len(set(ids)) != len(ids):
        raise AggregationError("duplicate client ids in one round")
    ref = previous if previous is not None else min(updates, key=lambda u: u.client_id).params
    ref_struct = ref.structure()
    for u in updates:
        if u.params.structure() != ref_struct:
            for (k, n, s), (k2, n2, s2) in zip(ref_struct, u.params.structure()):
                if (k, n, s) != (k2, n2, s2):
                    raise AggregationError(f"client {u.client_id!r}: {k}/{n} has shape {s2}, expected {s}")
            raise AggregationError(f"client {u.client_id!r}: parameter key sets differ")
    branches = {}
    for key, leaves in ref.items():
        weighted = aggregation_weights(updates, key)
        if not weighted:
            branches[key] = {n: ad.Tensor(t.data, t.requires_grad) for n, t in leaves.items()}
            continue
        out = {}
        for name, t in leaves.items():
            acc = None
            for u, w in weighted:
                term = w * u.params[key][name].data
                acc = term if acc is None else acc + term
            out[name] = ad.Tensor(acc, t.requires_grad)
        branches[key] = out
    return ParamTree(branches)


class Client:
    """Owns a local dataset; only weights, counts and metric summaries leave it."""

    def __init__(self, state: ClientState):
        self._state = state

    @property
    def client_id(self) -> str:
        return self._state.client_id

    def train(self, global_params: ParamTree, cfg: ModelConfig, seed: int, round_idx: int, rank: int):
        return local_train(self._state, global_params, cfg, seed, round_idx, rank)

    def evaluate(self, params: ParamTree, cfg: ModelConfig) -> EvalSummary:
        data = self._state.dataset
        labels = np.array([w.label for w in data], dtype=np.int64)
        probs = predict_proba(data, params, cfg)
        if not len(data):
            return EvalSummary(np.zeros((cfg.n_classes, cfg.n_classes), dtype=np.int64), 0.0)
        return EvalSummary(confusion_matrix(labels, probs.argmax(axis=1), cfg.n_classes), ce_sum(probs, labels))


class Server:
    """Holds the global model; sees ClientUpdate and EvalSummary values only."""

    def __init__(self, params: ParamTree):
        self.params = params

    def aggregate(self, updates: Sequence[ClientUpdate]) -> ParamTree:
        self.params = aggregate(updates, self.params)
        return self.params

    @staticmethod
    def combine(summaries: Sequence[EvalSummary]) -> MetricsReport | None:
        if not summaries:
            return None
        conf = sum(s.confusion for s in summaries)
        if conf.sum() == 0:
            return None
        return from_confusion(conf, sum(s.ce_sum for s in summaries))


def _as_clients(items) -> list[Client]:
    out = [c if isinstance(c, Client) else Client(c) for c in items]
    return sorted(out, key=lambda c: c.client_id)


@dataclass
class _Selector:
    run_dir: Path | None
    best_acc: float = -np.inf
    best_round: int = 0
    best: ParamTree | None = None
    logs: list[RoundLog] = field(default_factory=list)

    def record(self, r: int, params: ParamTree, losses: dict, report: MetricsReport | None, always: bool):
        acc = report.accuracy if report else 0.0
        log = RoundLog(
            r, losses, acc, report.macro_f1 if report else 0.0, report.ce_loss if report else 0.0
        )
        # strict improvement keeps the earliest round on ties; without
        # validation data the latest round wins
        if acc > self.best_acc or (always and report is None):
            self.best_acc, self.best_round, self.best = acc, r, params.copy()
            if self.run_dir is not None:
                (self.run_dir / f"best_round{r:04d}.bin").write_bytes(serialize(params))
        self.logs.append(log)

    def finish(self, initial: ParamTree) -> tuple[ParamTree, list[RoundLog]]:
        for log in self.logs:
            log.best = log.round == self.best_round
        if self.run_dir is not None:
            with (self.run_dir / "rounds.jsonl").open("w", encoding="utf-8") as fh:
                for log in self.logs:
                    fh.write(log.to_json() + "\n")
        return (self.best if self.best is not None else initial), self.logs


def run_rounds(
    clients: Sequence,
    cfg: ModelConfig,
    n_rounds: int,
    val_clients: Sequence = (),
    seed: int = 0,
    run_dir: str | Path | None = None,
    init: ParamTree | None = None,
    on_round: Callable[[RoundLog], None] | None = None,
) -> tuple[ParamTree, list[RoundLog]]:
    """FedAvg with full participation; returns the best-validation snapshot."""
    train = _as_clients(clients)
    val = _as_clients(val_clients)
    if not train:
        raise TrainingConfigError("no training clients")
    overlap = {c.client_id for c in train} & {c.client_id for c in val}
    if overlap:
        raise TrainingConfigError(f"clients in both train and validation: {sorted(overlap)}")
    run_dir = _prepare(run_dir)
    initial = init if init is not None else init_params(cfg, seed)
    server = Server(initial)
    sel = _Selector(run_dir)
    for r in range(1, n_rounds + 1):
        updates, losses = [], {}
        for rank, c in enumerate(train):
            res = c.train(server.params, cfg, seed, r, rank)
            if res is None:
                continue
            updates.append(res[0])
            losses[c.client_id] = res[1]
        if not updates:
            raise TrainingConfigError("every training client is empty")
        params = server.aggregate(updates)
        report = Server.combine([c.evaluate(params, cfg) for c in val])
        sel.record(r, params, losses, report, always=True)
        if on_round:
            on_round(sel.logs[-1])
    return sel.finish(initial)


def centralized_train(
    windows: Sequence[SensorWindow],
    cfg: ModelConfig,
    epochs: int,
    val_windows: Sequence[SensorWindow] = (),
    seed: int = 0,
    run_dir: str | Path | None = None,
    init: ParamTree | None = None,
) -> tuple[ParamTree, list[RoundLog]]:
    """Pooled training with epoch-level validation selection; Adam state persists across epochs."""
    if not windows:
        raise TrainingConfigError("no training windows")
    run_dir = _prepare(run_dir)
    initial = init if init is not None else init_params(cfg, seed)
    params = initial.copy()
    state = ad.AdamState()
    val_labels = np.array([w.label for w in val_windows], dtype=np.int64)
    sel = _Selector(run_dir)
    for e in range(1, epochs + 1):
        rng = np.random.default_rng([seed, e, 0])
        loss = _epoch(list(windows), params, state, cfg, rng)
        report = None
        if len(val_windows):
            probs = predict_proba(val_windows, params, cfg)
            conf = confusion_matrix(val_labels, probs.argmax(axis=1), cfg.n_classes)
            report = from_confusion(conf, ce_sum(probs, val_labels))
        sel.record(e, params, {"pooled": loss}, report, always=True)
    return sel.finish(initial)


def _prepare(run_dir) -> Path | None:
    if run_dir is None:
        return None
    p = Path(run_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p
