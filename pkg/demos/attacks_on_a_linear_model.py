"""
Attacks on a model whose answer we already know
===============================================

For a linear score the worst perturbation inside an L-infinity ball is known in
closed form: push every pixel by epsilon in the direction of its weight's sign.
This script checks FGSM and PGD against that answer.

Run: python demos/attacks_on_a_linear_model.py
"""
import numpy as np

from atas.attacks import AttackSpec, fgsm, pgd
from atas.models import LinearScoreModel

rng = np.random.default_rng(0)
w = rng.normal(size=(1, 5, 5))
x = rng.uniform(0.2, 0.8, size=(2, 1, 5, 5))     # stay clear of the [0, 1] edges
model = LinearScoreModel(w)
eps = 0.1

best = x + eps * np.sign(w)
print("clean score     ", model.loss(x))
print("best possible   ", model.loss(best))

# FGSM takes one full step, so it lands on the corner at once
print("fgsm            ", model.loss(fgsm(model, x, None, AttackSpec(eps))))

# PGD with K steps of eps/K walks to the same corner
for K in (1, 3, 10):
    adv = pgd(model, x, None, AttackSpec(eps, eps / K, K))
    print(f"pgd K={K:<2d}        ", model.loss(adv), " exact:", np.array_equal(adv, best))

# too small a step never reaches it
adv = pgd(model, x, None, AttackSpec(eps, eps / 20, 10))
print("pgd, short steps", model.loss(adv), " max |delta|:", np.abs(adv - x).max())
