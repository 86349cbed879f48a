"""
Decision paths and the alignment loss
=====================================

Two networks with the same shape are cut into M stages.  Picking the frozen
or the learnable copy at every stage gives 2^M decision paths, and every
path yields a representation of each user's sequence.  This script builds
the paths for a toy batch and shows how the pair weights and the annealed
coefficient behave.
"""

# %%
# Two small networks
# ------------------

import numpy as np

from flamerec import NetworkConfig, NetworkParams
from flamerec.data import Batch
from flamerec.ensemble import EnsembleState, forward_all, path_label
from flamerec.objectives import AnnealSchedule, anneal, bundle_weights, mkt_loss

cfg = NetworkConfig(n_items=30, max_len=8, d=16, n_layers=2, n_heads=2, dropout=0.0)
frozen = NetworkParams.init(cfg, np.random.default_rng(0))
learnable = NetworkParams.init(cfg, np.random.default_rng(1))

rng = np.random.default_rng(2)
ids = rng.integers(1, 31, size=(6, 8))
ids[:2, :3] = 0  # two users with short histories (left padding)
batch = Batch(ids, rng.integers(1, 31, size=6))

# %%
# Three stages: the embedding module, then one Transformer layer each
# -------------------------------------------------------------------

state = EnsembleState.build(frozen, learnable, M=3)
print("stages:", state.boundary.stages)
bundle = forward_all(batch, state)
for path, h in bundle.items():
    print(f"{path_label(path):>12}  |h| = {np.linalg.norm(h.data, axis=1).mean():.3f}")
print("stage executions with prefix sharing:", state.stage_executions, "(naive: 3 * 8 = 24)")

# %%
# Pair weights
# ------------
# Pairs whose representations already agree get less weight.

table = bundle_weights(bundle)
order = np.argsort(table.weights)
for i in order[:3]:
    p, q = table.pairs[i]
    print(f"most similar   {path_label(p)} / {path_label(q)}: sim={table.sims[i]:7.3f} w={table.weights[i]:.4f}")
for i in order[-3:]:
    p, q = table.pairs[i]
    print(f"least similar  {path_label(p)} / {path_label(q)}: sim={table.sims[i]:7.3f} w={table.weights[i]:.4f}")
print("alignment loss at tau=10:", round(mkt_loss(bundle, 10.0).item(), 4))

# %%
# The coefficient schedule
# ------------------------
# Geometric decay from lambda0 to lambda_R over R epochs.

sched = AnnealSchedule(0.1, 1e-5, 200)
for r in (0, 50, 100, 150, 200):
    print(f"epoch offset {r:3d}: lambda = {anneal(r, sched):.2e}")
