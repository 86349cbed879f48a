"""Independent oracles shared by the test modules."""

import numpy as np

from flamerec.backbone import NetworkConfig, NetworkParams
from flamerec.data import Batch, pad_or_truncate


def central_fd(f, arrays, step=1e-3):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arrays``.

    ``arrays`` are float64 buffers that ``f`` reads; they are perturbed in place
    and restored.
    """
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            fp = f()
            flat[i] = old - step
            fm = f()
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * step)
        out.append(g)
    return out


def rel_error(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def tiny_params(seed=0, n_items=12, max_len=6, d=4, n_layers=2, n_heads=2, dropout=0.0,
                dtype=np.float32):
    cfg = NetworkConfig(n_items=n_items, max_len=max_len, d=d, n_layers=n_layers, n_heads=n_heads,
                        dropout=dropout)
    p = NetworkParams.init(cfg, np.random.default_rng(seed))
    # perturb so layer-norm affine terms are not trivially 1/0
    rng = np.random.default_rng(seed + 100)
    for name, t in p.named_parameters().items():
        if "ln" in name:
            t.data = (t.data + rng.normal(0, 0.1, t.shape)).astype(np.float32)
    return p.astype(dtype) if dtype != np.float32 else p


def random_batch(rng, n_items, max_len, B, min_len=1):
    hist, tgt = [], []
    for _ in range(B):
        n = int(rng.integers(min_len, max_len + 1))
        hist.append(rng.integers(1, n_items + 1, size=n))
        tgt.append(int(rng.integers(1, n_items + 1)))
    ids = np.stack([pad_or_truncate(h, max_len) for h in hist])
    return Batch(ids, np.asarray(tgt), np.arange(B))


# --- brute-force ranking oracles (pure python) -----------------------------


def oracle_rank(scores, target):
    """Position of ``target`` after sorting by (-score, item id)."""
    order = sorted(range(1, len(scores) + 1), key=lambda i: (-scores[i - 1], i))
    return order.index(target) + 1


def oracle_hr(ranks, k):
    return sum(1 for r in ranks if r <= k) / len(ranks)


def oracle_ndcg(ranks, k):
    import math

    return math.fsum(1 / math.log2(r + 1) for r in ranks if r <= k) / len(ranks)


def oracle_per(hi, hj):
    hi, hj = set(hi), set(hj)
    return float("nan") if not hi else len([u for u in hi if u not in hj]) / len(hi)
