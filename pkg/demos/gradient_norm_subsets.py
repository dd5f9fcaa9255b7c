"""
Which examples drive a collapse?
================================

Rank training examples by their average input-gradient norm over a few training
epochs, then adversarially train only on the lowest or highest decile with the
same number of iterations and compare robustness. Also prints a loss surface
slice around one example.

Run: python demos/gradient_norm_subsets.py
"""
import numpy as np

from atas.data import synth_generate
from atas.diagnostics import (SubsetSpec, decile_subset, grad_norm_profile, loss_surface,
                              train_on_subset)
from atas.models import ModelConfig, build
from atas.trainers import TrainConfig, fit

data = synth_generate(per_class=100, noise=0.3, seed=0)
eps = 0.3

model = build(ModelConfig("cnn", channels=(8, 16), seed=0))
warm = fit(model, data, TrainConfig(method="fgsm_rs", epsilon=eps, epochs=2, eval_size=200))
profile = grad_norm_profile(warm.grad_norms)
print("gradient norm quantiles", np.round(np.quantile(profile.gn, [0.1, 0.5, 0.9]), 3))

for lo, hi in ((1, 1), (10, 10)):
    ids = decile_subset(profile, SubsetSpec(lo, hi))
    m = build(ModelConfig("cnn", channels=(8, 16), seed=0))
    cfg = TrainConfig(method="fgsm_rs", alpha=1.75 * eps, epsilon=eps, epochs=3, eval_size=200)
    h = train_on_subset(m, data, cfg, ids, iteration_budget=300)
    print(f"decile {lo:>2d}: {len(ids)} examples, pgd10 {np.round(h.column('pgd10_acc'), 2)}")

grid = loss_surface(model, data.images[:1], data.labels[:1], eps, grid_n=5,
                    rng=np.random.default_rng(0))
print("loss on a 5x5 slice (rows: signed gradient, cols: random sign)")
print(np.round(grid.loss, 3))
