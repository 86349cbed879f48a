"""End-to-end comparison of the four training modes on first-order Markov data.

Every mode is trained with the same seeds on one synthetic dataset.  The
frozen anchor for seed ``s`` is the single-network model trained with the
next seed in the list, so no extra pretraining runs are needed and the
anchor never shares its initialisation with the learnable network.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .data import SequenceDataset, build_sequences
from .evaluation import evaluate, popularity_report
from .synthetic import markov_log
from .training import TrainConfig, TrainResult, train


@dataclass
class BenchmarkSettings:
    seeds: Sequence[int] = (0, 1, 2, 3, 4)
    n_users: int = 2000
    n_items: int = 200
    min_seq: int = 20
    max_seq: int = 50
    data_seed: int = 0
    max_len: int = 10
    d: int = 32
    epochs: int = 50
    patience: int = 10
    batch_size: int = 256
    dropout: float = 0.5
    # picked from the tau x lambda0 grid by seed-0 validation NDCG@20
    tau: float = 10.0
    lambda0: float = 0.01
    lambda_R: float = 1e-5
    per_position: bool = True

    def train_config(self, mode: str, seed: int) -> TrainConfig:
        return TrainConfig(mode=mode, seed=seed, d=self.d, max_len=self.max_len, dropout=self.dropout,
                           batch_size=self.batch_size, epochs=self.epochs, patience=self.patience,
                           tau=self.tau, lambda0=self.lambda0, lambda_R=self.lambda_R,
                           per_position=self.per_position)


def epochs_to_fraction(trace: Sequence[float], fraction: float = 0.95) -> int:
    """First 1-based epoch whose value reaches ``fraction`` of the trace's peak."""
    if not trace:
        raise ValueError("empty trace")
    target = fraction * max(trace)
    return next(i for i, v in enumerate(trace, start=1) if v >= target)


@dataclass
class RunSummary:
    mode: str
    seed: int
    test_hr10: float
    test_ndcg20: float
    best_epoch: int
    epochs_run: int
    # one entry per trained network (two for ensemble_scratch)
    epochs_to_95: list[int]
    seconds: float


@dataclass
class BenchmarkResult:
    settings: BenchmarkSettings
    popularity_hr10: float
    runs: list[RunSummary] = field(default_factory=list)
    seconds: float = 0.0

    def of(self, mode: str) -> list[RunSummary]:
        return [r for r in self.runs if r.mode == mode]

    def median(self, mode: str, attr: str) -> float:
        return statistics.median(getattr(r, attr) for r in self.of(mode))

    def median_epochs_to_95(self, mode: str) -> float:
        return statistics.median(e for r in self.of(mode) for e in r.epochs_to_95)


def make_dataset(s: BenchmarkSettings) -> SequenceDataset:
    log = markov_log(n_users=s.n_users, n_items=s.n_items, min_len=s.min_seq, max_len=s.max_seq, seed=s.data_seed)
    return build_sequences(log, s.max_len)


def _summarise(mode: str, seed: int, result: TrainResult, ds: SequenceDataset, seconds: float) -> RunSummary:
    report = evaluate(result.checkpoint.to_params(requires_grad=False), ds, "test")
    e95 = [epochs_to_fraction([h["val_NDCG@20"] for h in result.history[name]])
           for name in result.checkpoints]
    return RunSummary(mode, seed, report.hr[10], report.ndcg[20], result.best_epoch, result.epochs_run, e95, seconds)


def run_benchmark(settings: BenchmarkSettings | None = None,
                  modes: Sequence[str] = ("single", "flame", "ensemble_guide", "ensemble_scratch"),
                  log: Callable[[str], None] | None = None) -> BenchmarkResult:
    s = settings or BenchmarkSettings()
    start = time.perf_counter()
    ds = make_dataset(s)
    out = BenchmarkResult(s, popularity_report(ds, "test").hr[10])
    seeds = list(s.seeds)
    anchors = {}
    for seed in seeds:
        t = time.perf_counter()
        result = train(s.train_config("single", seed), ds)
        anchors[seed] = result.checkpoint
        summary = _summarise("single", seed, result, ds, time.perf_counter() - t)
        if "single" in modes:
            out.runs.append(summary)
            if log:
                log(f"{summary}")
    for i, seed in enumerate(seeds):
        frozen = anchors[seeds[(i + 1) % len(seeds)]]
        for mode in modes:
            if mode == "single":
                continue
            t = time.perf_counter()
            result = train(s.train_config(mode, seed), ds, frozen)
            out.runs.append(_summarise(mode, seed, result, ds, time.perf_counter() - t))
            if log:
                log(f"{out.runs[-1]}")
    out.seconds = time.perf_counter() - start
    return out
