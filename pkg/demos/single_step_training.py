"""
Single-step adversarial training: fixed versus adaptive step sizes
==================================================================

FGSM with a random start and a large fixed step can suddenly lose all
robustness to multi-step attacks while still resisting the one-step attack it
trains on. The adaptive trainer keeps each example's perturbation from the last
epoch and scales its step by that example's gradient history.

This is a small version of the acceptance experiment: 2,000 synthetic digits,
eps = 0.3, 8 epochs. Takes under a minute on one core.

Run: python demos/single_step_training.py
"""
import numpy as np

from atas.data import synth_generate
from atas.diagnostics import detect_co
from atas.models import ModelConfig, build
from atas.trainers import TrainConfig, fit

data = synth_generate(per_class=200, noise=0.3, seed=0)
eps = 0.3

runs = {
    "fgsm_rs": TrainConfig(method="fgsm_rs", alpha=1.75 * eps),
    "atta": TrainConfig(method="atta"),
    "atas": TrainConfig(method="atas"),
}
for name, cfg in runs.items():
    cfg = TrainConfig(method=cfg.method, alpha=cfg.alpha, epsilon=eps, epochs=8,
                      batch_size=64, eval_size=300, seed=1)
    model = build(ModelConfig("cnn", channels=(8, 16), seed=1))
    h = fit(model, data, cfg)
    co = detect_co(h)
    print(f"{name:8s} pgd10 {np.round(h.column('pgd10_acc'), 2)}")
    print(f"{'':8s} fgsm  {np.round(h.column('fgsm_acc'), 2)}")
    print(f"{'':8s} mean step {h.records[-1].mean_step_size:.3f}, "
          f"collapse at epoch {co.epoch if co else None}")
