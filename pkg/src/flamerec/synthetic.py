"""First-order Markov interaction logs for experiments and tests."""

from __future__ import annotations

import numpy as np

from .data import InteractionLog, parse_interactions


def markov_transitions(n_items: int, n_successors: int = 3, follow_prob: float = 0.8,
                       rng: np.random.Generator | None = None) -> np.ndarray:
    """Row-stochastic [n_items, n_items] matrix.

    Each item moves to one of ``n_successors`` fixed items with total
    probability ``follow_prob`` and otherwise to a uniformly random item.
    """
    rng = rng or np.random.default_rng(0)
    P = np.full((n_items, n_items), (1.0 - follow_prob) / n_items)
    for i in range(n_items):
        succ = rng.choice(n_items, size=n_successors, replace=False)
        w = rng.dirichlet(np.ones(n_successors))
        P[i, succ] += follow_prob * w
    return P / P.sum(axis=1, keepdims=True)


def markov_tsv(n_users: int = 2000, n_items: int = 200, min_len: int = 20, max_len: int = 50,
               seed: int = 0, n_successors: int = 3, follow_prob: float = 0.8) -> bytes:
    """TSV bytes (user, item, timestamp) sampled from a Markov chain over items."""
    rng = np.random.default_rng(seed)
    P = markov_transitions(n_items, n_successors, follow_prob, rng)
    cdf = np.cumsum(P, axis=1)
    lines = []
    for u in range(n_users):
        length = int(rng.integers(min_len, max_len + 1))
        item = int(rng.integers(n_items))
        draws = rng.random(length)
        for t in range(length):
            lines.append(f"u{u}\ti{item}\t{1_000_000 + 60 * t}")
            item = min(int(np.searchsorted(cdf[item], draws[t], side="right")), n_items - 1)
    return ("\n".join(lines) + "\n").encode("utf-8")


def markov_log(**kwargs) -> InteractionLog:
    return parse_interactions(markov_tsv(**kwargs))
