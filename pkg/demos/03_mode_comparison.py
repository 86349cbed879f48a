"""
Single, conventional ensembles and the modular ensemble
=======================================================

Runs the four training modes over several seeds on the Markov benchmark and
prints median test metrics and how fast each mode's validation NDCG@20
reaches 95% of its peak.  The full setting (2000 users, 5 seeds, 50 epochs)
takes roughly ten minutes on one CPU core; pass ``--quick`` for a smaller
smoke run, which trains too briefly to beat the popularity baseline.
"""

# %%

import sys

from flamerec.benchmark import BenchmarkSettings, run_benchmark

settings = BenchmarkSettings()
if "--quick" in sys.argv:
    settings = BenchmarkSettings(seeds=(0, 1, 2), n_users=500, epochs=15, patience=5)

res = run_benchmark(settings, log=lambda line: print(line, flush=True))

# %%
# Summary
# -------

print(f"\npopularity HR@10 {res.popularity_hr10:.4f}")
print(f"{'mode':>18} {'HR@10':>8} {'NDCG@20':>8} {'epochs to 95%':>14}")
for mode in ("single", "flame", "ensemble_guide", "ensemble_scratch"):
    print(f"{mode:>18} {res.median(mode, 'test_hr10'):8.4f} {res.median(mode, 'test_ndcg20'):8.4f} "
          f"{res.median_epochs_to_95(mode):14.1f}")
print(f"total {res.seconds / 60:.1f} min")
