"""L-infinity attacks: signed gradient steps, box projection, FGSM, random start, PGD."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError


@dataclass(frozen=True)
class AttackSpec:
    epsilon: float
    alpha: float | None = None     # None means alpha = epsilon
    steps: int = 1
    random_start: bool = False
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.alpha is not None and self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.lo < self.hi:
            raise ValueError("need lo < hi")

    @property
    def step_size(self) -> float:
        return self.epsilon if self.alpha is None else self.alpha


def pgd_eval_spec(epsilon: float, steps: int = 10, lo: float = 0.0, hi: float = 1.0,
                  random_start: bool = True) -> AttackSpec:
    """Evaluation PGD: alpha = epsilon / 4, one uniformly random restart."""
    return AttackSpec(epsilon, epsilon / 4, steps, random_start, lo, hi)


def _same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"shape mismatch {np.shape(a)} vs {np.shape(b)}")


def sign_step(x, grad, alpha):
    """``x + alpha * sgn(grad)`` with sgn(0) = 0. ``alpha`` may broadcast per example."""
    _same_shape(x, grad)
    return x + alpha * np.sign(grad)


def project_box(x_adv, x_ref, epsilon, lo=0.0, hi=1.0):
    """Clamp into [x_ref - eps, x_ref + eps] intersected with [lo, hi]."""
    _same_shape(x_adv, x_ref)
    out = np.clip(x_adv, x_ref - epsilon, x_ref + epsilon)
    return np.clip(out, lo, hi)


def random_start(x, epsilon, rng, lo=0.0, hi=1.0):
    """``x + U[-eps, eps]`` per coordinate, clamped to the domain."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    u = rng.uniform(-epsilon, epsilon, size=np.shape(x))
    return np.clip(x + u, lo, hi)


def input_grad(model, x, y):
    loss, _, gx = model.loss_and_grads(x, y, need_input_grad=True)
    return loss, gx


def fgsm(model, x, y, spec: AttackSpec):
    """One signed step of size epsilon from the clean point (alpha in ``spec`` is ignored)."""
    _, g = input_grad(model, x, y)
    return project_box(sign_step(x, g, spec.epsilon), x, spec.epsilon, spec.lo, spec.hi)


def pgd(model, x, y, spec: AttackSpec, rng=None):
    """``spec.steps`` iterations of sign step + projection.

    Starts from a uniform random point when ``spec.random_start``; ``rng`` is
    then required.
    """
    if spec.random_start:
        if rng is None:
            raise ValueError("random_start needs an rng")
        x_adv = random_start(x, spec.epsilon, rng, spec.lo, spec.hi)
    else:
        x_adv = np.array(x, dtype=np.float64)
    for _ in range(spec.steps):
        _, g = input_grad(model, x_adv, y)
        x_adv = project_box(sign_step(x_adv, g, spec.step_size), x, spec.epsilon, spec.lo, spec.hi)
    return snap_to_budget(x_adv, x, spec.epsilon, spec.lo, spec.hi)


def snap_to_budget(x_adv, x_ref, epsilon, lo=0.0, hi=1.0, rtol=1e-9):
    """Put coordinates within rounding distance of the box face exactly on it.

    K steps of eps/K sum to eps only up to float error; without this the
    result can sit an ulp inside the face.
    """
    d = x_adv - x_ref
    near = np.abs(d) >= epsilon * (1 - rtol)
    if epsilon == 0 or not near.any():
        return x_adv
    face = np.clip(x_ref + np.sign(d) * epsilon, lo, hi)
    return np.where(near, face, x_adv)


def linf_distance(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)), initial=0.0))
