"""Full-ranking next-item evaluation, HR/NDCG and pairwise exclusive-hit ratios."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .backbone import NetworkParams, forward
from .data import SequenceDataset, make_eval_batches
from .ensemble import EnsembleState, enumerate_paths, forward_all, path_label
from .numerics import Tensor, no_grad

DEFAULT_KS = (5, 10, 20)
PER_K = 20
NA = "NA"


def _array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def score_all_items(h, item_table) -> np.ndarray:
    """Softmax probabilities over real items (ids 1..n -> columns 0..n-1)."""
    h, table = _array(h), _array(item_table)
    logits = h.astype(np.float64) @ table[1:].astype(np.float64).T
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def raw_scores(h, item_table) -> np.ndarray:
    h, table = _array(h), _array(item_table)
    return h @ table[1:].T


def rank_of_target(scores: Sequence[float], target: int) -> int:
    """1-based rank of item ``target``; ties go to the smaller item id."""
    s = np.asarray(scores)
    t = s[target - 1]
    ahead = np.count_nonzero(s > t) + np.count_nonzero(s[: target - 1] == t)
    return int(ahead) + 1


def ranks_of_targets(scores: np.ndarray, targets) -> np.ndarray:
    """Vectorised :func:`rank_of_target` over rows of ``scores``."""
    targets = np.asarray(targets, dtype=np.int64)
    rows = np.arange(len(targets))
    t = scores[rows, targets - 1][:, None]
    ids = np.arange(1, scores.shape[1] + 1)[None, :]
    ahead = (scores > t) | ((scores == t) & (ids < targets[:, None]))
    return ahead.sum(axis=1) + 1


def hr_at_k(ranks, k: int) -> float:
    if k < 1:
        raise ValueError("K must be >= 1")
    ranks = np.asarray(ranks)
    return float(np.mean(ranks <= k)) if ranks.size else 0.0


def ndcg_at_k(ranks, k: int) -> float:
    if k < 1:
        raise ValueError("K must be >= 1")
    ranks = np.asarray(ranks, dtype=np.int64)
    if not ranks.size:
        return 0.0
    # correctly rounded sum, so the value does not depend on user order
    return math.fsum(1.0 / math.log2(r + 1) for r in ranks[ranks <= k].tolist()) / ranks.size


def hit_set(ranks, users: Iterable[int], k: int = PER_K) -> frozenset:
    return frozenset(int(u) for u, r in zip(users, ranks) if r <= k)


def per(hits_i: frozenset, hits_j: frozenset) -> float:
    """|H_i - H_j| / |H_i|; NaN when H_i is empty."""
    if not hits_i:
        return math.nan
    return len(hits_i - hits_j) / len(hits_i)


def per_matrix(hit_sets: Sequence[frozenset]) -> np.ndarray:
    n = len(hit_sets)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            out[i, j] = per(hit_sets[i], hit_sets[j])
    return out


@dataclass
class MetricReport:
    hr: dict[int, float]
    ndcg: dict[int, float]
    ranks: np.ndarray
    n_users: int
    users: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @classmethod
    def from_ranks(cls, ranks, ks: Sequence[int] = DEFAULT_KS, users=None) -> MetricReport:
        ranks = np.asarray(ranks, dtype=np.int64)
        users = np.arange(len(ranks)) if users is None else np.asarray(users)
        return cls({k: hr_at_k(ranks, k) for k in ks}, {k: ndcg_at_k(ranks, k) for k in ks},
                   ranks, len(ranks), users)

    def hits(self, k: int = PER_K) -> frozenset:
        return hit_set(self.ranks, self.users, k)

    def as_row(self, prefix: str = "") -> dict[str, float]:
        row = {f"{prefix}HR@{k}": v for k, v in self.hr.items()}
        row.update({f"{prefix}NDCG@{k}": v for k, v in self.ndcg.items()})
        return row


@dataclass
class PathsReport:
    reports: dict[tuple, MetricReport]
    labels: list[str]
    per: np.ndarray


def _history_mask(dataset: SequenceDataset, split: str, users: np.ndarray) -> list[np.ndarray]:
    hist, _ = dataset.eval_inputs(split)
    return [hist[u] for u in users]


def _ranks(h, item_table, batch, dataset, split, mask_history) -> np.ndarray:
    scores = raw_scores(h, item_table)
    if mask_history:
        scores = scores.astype(np.float64, copy=True)
        for row, seen in enumerate(_history_mask(dataset, split, batch.users)):
            keep_target = batch.targets[row]
            idx = np.unique(seen)
            idx = idx[idx != keep_target]
            scores[row, idx - 1] = -np.inf
    return ranks_of_targets(scores, batch.targets)


def evaluate(model, dataset: SequenceDataset, split: str = "valid", ks: Sequence[int] = DEFAULT_KS,
             source: str = "lrn", mask_history: bool = False, batch_size: int = 1024):
    """Rank every real item for each user's held-out target.

    ``model`` is a NetworkParams or an EnsembleState.  ``source="lrn"`` scores
    with the learnable network alone and returns a MetricReport;
    ``source="all-paths"`` returns a PathsReport with one report per decision
    path and the PER matrix at K=20.
    """
    if source == "lrn":
        params = model.learnable if isinstance(model, EnsembleState) else model
        ranks, users = [], []
        with no_grad():
            for batch in make_eval_batches(dataset, split, batch_size):
                h = forward(batch, params, training=False)
                ranks.append(_ranks(h, params.item_table, batch, dataset, split, mask_history))
                users.append(batch.users)
        return MetricReport.from_ranks(np.concatenate(ranks), ks, np.concatenate(users))
    if source == "all-paths":
        if not isinstance(model, EnsembleState):
            raise TypeError("all-paths evaluation needs an EnsembleState")
        paths = enumerate_paths(model.M)
        ranks = {p: [] for p in paths}
        users = []
        with no_grad():
            for batch in make_eval_batches(dataset, split, batch_size):
                bundle = forward_all(batch, model, training=False)
                # each path scores with the item table of its final stage's owner
                for p in paths:
                    table = model.network(p[-1]).item_table
                    ranks[p].append(_ranks(bundle[p], table, batch, dataset, split, mask_history))
                users.append(batch.users)
        users = np.concatenate(users)
        reports = {p: MetricReport.from_ranks(np.concatenate(ranks[p]), ks, users) for p in paths}
        hits = [reports[p].hits(PER_K) for p in paths]
        return PathsReport(reports, [path_label(p) for p in paths], per_matrix(hits))
    raise ValueError(f"unknown source {source!r}")


def popularity_report(dataset: SequenceDataset, split: str = "test", ks: Sequence[int] = DEFAULT_KS
                      ) -> MetricReport:
    """Rank items by training-split frequency, identical for every user."""
    counts = dataset.item_counts()[1:].astype(np.float64)
    _, targets = dataset.eval_inputs(split)
    scores = np.broadcast_to(counts, (len(targets), len(counts)))
    return MetricReport.from_ranks(ranks_of_targets(scores, targets), ks)


# --- CSV output ------------------------------------------------------------


def write_report_csv(report: MetricReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "K", "value"])
        for k, v in report.hr.items():
            w.writerow(["HR", k, repr(v)])
        for k, v in report.ndcg.items():
            w.writerow(["NDCG", k, repr(v)])


def write_per_csv(matrix: np.ndarray, labels: Sequence[str], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([""] + list(labels))
        for label, row in zip(labels, matrix):
            w.writerow([label] + [NA if math.isnan(v) else repr(float(v)) for v in row])


def read_per_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    labels = rows[0][1:]
    mat = np.array([[math.nan if v == NA else float(v) for v in r[1:]] for r in rows[1:]])
    return labels, mat
