"""Training objectives: next-item loss, pairwise InfoNCE alignment, similarity
weighting across path pairs, and the geometric coefficient schedule."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Hashable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError
from .numerics import Tensor


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 1.0
    weighting: str = "similarity"  # or "uniform"
    normalize: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")
        if self.weighting not in ("similarity", "uniform"):
            raise ConfigError(f"unknown weighting {self.weighting!r}")


@dataclass(frozen=True)
class AnnealSchedule:
    lambda0: float
    lambda_R: float
    R: int

    def __post_init__(self):
        if self.R < 1:
            raise ConfigError(f"R must be >= 1, got {self.R}")
        if self.lambda0 < 0 or self.lambda_R < 0:
            raise ConfigError("annealing coefficients must be non-negative")
        if self.lambda0 == 0 and self.lambda_R != 0:
            raise ConfigError("cannot anneal geometrically away from lambda0 = 0")


def anneal(r: float, sched: AnnealSchedule) -> float:
    """lambda0 * (lambda_R / lambda0) ** (r / R), clamped to [0, R]."""
    if r <= 0:
        return sched.lambda0
    if r >= sched.R:
        return sched.lambda_R
    if sched.lambda0 == sched.lambda_R:
        return sched.lambda0
    return sched.lambda0 * (sched.lambda_R / sched.lambda0) ** (r / sched.R)


def rec_loss(h: Tensor, item_table: Tensor, targets) -> Tensor:
    """Full-softmax next-item loss over real items (padding row excluded)."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size and targets.min() < 1:
        raise ContractError("targets must be real item ids (>= 1)")
    logits = h @ item_table[1:].transpose()
    return nx.cross_entropy(logits, targets - 1)


def rec_loss_per_position(H: Tensor, item_table: Tensor, position_targets: np.ndarray) -> Tensor:
    """Next-item loss averaged over every slot that has a target (> 0)."""
    rows, cols = np.nonzero(position_targets)
    flat = H[rows, cols, :]
    return rec_loss(flat, item_table, position_targets[rows, cols])


def _maybe_normalize(x: Tensor, normalize: bool) -> Tensor:
    if not normalize:
        return x
    norms = np.sqrt((x.data.astype(np.float64) ** 2).sum(axis=1, keepdims=True)) + nx.LOG_EPS
    # normalisation scale treated as a constant per row
    return x * (1.0 / norms).astype(x.dtype)


def nce_loss(hp: Tensor, hq: Tensor, tau: float, normalize: bool = False,
             symmetric: bool = True) -> Tensor:
    """In-batch InfoNCE between two views of the same users.

    The positive pair also sits in the denominator.  By default both
    directions (p->q and q->p) are averaged; ``symmetric=False`` keeps only
    p->q, where user u's negatives are ``hq`` rows of the other users.
    """
    B = hp.shape[0]
    if B < 2:
        raise ContractError("InfoNCE needs at least 2 users per batch")
    if hp.shape != hq.shape:
        raise ContractError(f"shape mismatch {hp.shape} vs {hq.shape}")
    hp, hq = _maybe_normalize(hp, normalize), _maybe_normalize(hq, normalize)
    logits = (hp @ hq.transpose()) * (1.0 / tau)
    labels = np.arange(B)
    forward_dir = nx.cross_entropy(logits, labels)
    if not symmetric:
        return forward_dir
    backward_dir = nx.cross_entropy(logits.transpose(), labels)
    return (forward_dir + backward_dir) * 0.5


def pair_similarity(hp: Tensor, hq: Tensor) -> float:
    """Batch mean of per-user dot products; no gradient."""
    a = hp.data if isinstance(hp, Tensor) else np.asarray(hp)
    b = hq.data if isinstance(hq, Tensor) else np.asarray(hq)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean(np.sum(a.astype(np.float64) * b.astype(np.float64), axis=1)))


@dataclass
class PairWeightTable:
    pairs: list[tuple]
    sims: np.ndarray
    weights: np.ndarray

    def as_dict(self) -> dict[tuple, float]:
        return {p: float(w) for p, w in zip(self.pairs, self.weights)}


def pair_weights(sims: Sequence[float], pairs: Sequence[tuple] | None = None) -> PairWeightTable:
    """Softmax over negated similarities across all pairs."""
    s = np.asarray(sims, dtype=np.float64)
    if s.size < 1:
        raise ContractError("need at least one pair")
    z = -s - np.max(-s)
    e = np.exp(z)
    w = e / e.sum()
    pairs = list(pairs) if pairs is not None else list(range(len(s)))
    return PairWeightTable(pairs, s, w)


def unordered_pairs(keys: Sequence[Hashable]) -> list[tuple]:
    return list(itertools.combinations(keys, 2))


def bundle_weights(bundle: Mapping[Hashable, Tensor]) -> PairWeightTable:
    pairs = unordered_pairs(list(bundle))
    sims = [pair_similarity(bundle[p], bundle[q]) for p, q in pairs]
    return pair_weights(sims, pairs)


def cl_loss(bundle: Mapping[Hashable, Tensor], tau: float, normalize: bool = False) -> Tensor:
    """Unweighted sum of pairwise InfoNCE over all unordered pairs."""
    if len(bundle) < 2:
        raise ContractError("need at least two representations")
    total = None
    for p, q in unordered_pairs(list(bundle)):
        term = nce_loss(bundle[p], bundle[q], tau, normalize)
        total = term if total is None else total + term
    return total


def mkt_loss(bundle: Mapping[Hashable, Tensor], tau: float, weighting: str = "similarity",
             weights: PairWeightTable | None = None, normalize: bool = False) -> Tensor:
    """Weighted sum of pairwise InfoNCE.

    With ``weighting="similarity"`` the weights come from the current batch
    (or ``weights`` if given) and are constants for backpropagation.
    ``"uniform"`` uses 1 / #pairs.
    """
    if len(bundle) < 2:
        raise ContractError("need at least two representations")
    pairs = unordered_pairs(list(bundle))
    if weights is None:
        if weighting == "similarity":
            weights = bundle_weights(bundle)
        elif weighting == "uniform":
            weights = PairWeightTable(pairs, np.zeros(len(pairs)), np.full(len(pairs), 1.0 / len(pairs)))
        else:
            raise ConfigError(f"unknown weighting {weighting!r}")
    w = weights.as_dict()
    total = None
    for p, q in pairs:
        term = nce_loss(bundle[p], bundle[q], tau, normalize) * w[(p, q)]
        total = term if total is None else total + term
    return total


def conventional_mkt(reps: Sequence[Tensor], tau: float, normalize: bool = False) -> Tensor:
    """Pairwise InfoNCE summed over network pairs (conventional ensembles)."""
    if len(reps) < 2:
        raise ConfigError("conventional transfer needs at least two networks")
    return cl_loss(dict(enumerate(reps)), tau, normalize)


def total_loss(rec: Tensor, mkt: Tensor | None, lam: float) -> Tensor:
    if lam < 0:
        raise ContractError(f"lambda must be non-negative, got {lam}")
    if mkt is None or lam == 0:
        return rec
    return rec + mkt * lam

