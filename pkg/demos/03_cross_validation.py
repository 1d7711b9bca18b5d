"""
A short cross-validated training run
====================================

Trains on 18 synthetic images with 3-fold CV. This is a quick look at
the training loop; the acceptance suite runs the full 45-image version.
"""

import time

from cellgraph import gnn, trainer
from cellgraph.graphbuilder import AugmentParams
from cellgraph.pipeline import build_samples, synthetic_feature_sets

t0 = time.time()
sets = synthetic_feature_sets(18, seed=1)
samples = build_samples(sets, AugmentParams(M=100), patched=True, seed=1)
print(f"{len(samples)} graphs built in {time.time() - t0:.1f} s")

hp = gnn.HyperParams(e=16, pool_sizes=(8, 2, 1))
config = trainer.TrainConfig(lr0=1e-2, epochs=60, seed=1)
reports = trainer.cross_validate(samples, hp, config)
for r in reports:
    curve = [round(e.val_accuracy, 2) for e in r.epochs[9::10]]
    print(f"fold {r.fold_id}: val accuracy every 10 epochs {curve}")

mean, std = trainer.evaluate_cv(reports)
print(f"3-fold accuracy {mean:.2f} +- {std:.2f} % in {time.time() - t0:.0f} s")
