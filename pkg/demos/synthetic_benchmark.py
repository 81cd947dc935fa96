"""
Synthetic benchmark: regular vs episodic vs episodic + denoising
================================================================

Trains the ``tiny`` preset three ways on 8 training classes and scores each model on
4 held-out classes, 200 episodes per seed. Takes several minutes on one CPU core.
"""

import sys
import tempfile

import numpy as np
import torch

from semifss.benchmark import run_benchmark
from semifss.evaluation import EvalReport, summary_table

torch.set_num_threads(1)
seeds = tuple(int(s) for s in sys.argv[1:]) or (0, 1, 2)
corpus, results = run_benchmark(tempfile.mkdtemp(), seeds=seeds)

# %%
# One row per arm and shot count, averaged over seeds, in the layout of a results table.
rows = []
for arm in dict.fromkeys(r.arm for r in results):
    for k in (1, 5):
        vals = [r.dsc[k] for r in results if r.arm == arm]
        rows.append(EvalReport(per_episode=[], mean_dsc=float(np.mean(vals)), std_dsc=float(np.std(vals)),
                               k=k, n_episodes=200, label=arm,
                               additional_samples=10 if "denoise" in arm else None))
print()
print(summary_table(rows))
print("(std is across seeds)")
