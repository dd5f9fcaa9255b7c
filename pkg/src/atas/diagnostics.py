"""Instrumentation: gradient-norm profiles and decile subsets, subset training,
loss-surface probes and catastrophic-overfitting detection."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .attacks import input_grad
from .autodiff import NonFiniteError
from .trainers import TrainConfig, TrainHistory, fit


@dataclass
class GradNormProfile:
    gn: np.ndarray        # per-example average gradient norm
    rank: np.ndarray      # fraction of examples ranked below, in [0, 1)
    epochs: int

    def to_csv(self, labels=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "gn", "rank", "label"])
        for i in range(len(self.gn)):
            w.writerow([i, repr(float(self.gn[i])), repr(float(self.rank[i])),
                        "" if labels is None else int(labels[i])])
        return buf.getvalue()


def grad_norm_profile(norms) -> GradNormProfile:
    """Average a (epochs, n) log of per-example gradient norms and rank the averages.

    NaN entries (example not visited that epoch) are skipped; an example with
    no logged epoch at all is an error. Ties are ranked by example id.
    """
    norms = np.atleast_2d(np.asarray(norms, dtype=np.float64))
    if norms.shape[0] < 1 or norms.shape[1] < 1:
        raise ValueError("need at least one epoch of norms")
    seen = ~np.isnan(norms)
    if not seen.any(axis=0).all():
        missing = np.flatnonzero(~seen.any(axis=0))
        raise ValueError(f"examples {missing[:5].tolist()} have no logged epochs")
    gn = np.where(seen, norms, 0.0).sum(axis=0) / seen.sum(axis=0)
    n = gn.size
    order = np.lexsort((np.arange(n), gn))
    rank = np.empty(n)
    rank[order] = np.arange(n) / n
    return GradNormProfile(gn, rank, norms.shape[0])


@dataclass(frozen=True)
class SubsetSpec:
    lo: int   # first decile, 1-based
    hi: int   # last decile, inclusive

    def __post_init__(self):
        if not 1 <= self.lo <= self.hi <= 10:
            raise ValueError(f"need 1 <= lo <= hi <= 10, got {self.lo}, {self.hi}")


def decile_subset(profile: GradNormProfile, spec: SubsetSpec) -> np.ndarray:
    """Ids whose rank fraction lies in [(lo - 1) / 10, hi / 10)."""
    n = profile.rank.size
    pos = np.rint(profile.rank * n).astype(np.int64)    # exact integer positions
    keep = (10 * pos >= (spec.lo - 1) * n) & (10 * pos < spec.hi * n)
    return np.flatnonzero(keep)


def class_balance(ids, labels, num_classes=None) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("empty id set")
    lab = np.asarray(labels)[ids]
    k = int(num_classes or (np.max(labels) + 1))
    return np.bincount(lab, minlength=k) / ids.size


def train_on_subset(model, data, cfg: TrainConfig, subset, iteration_budget, state=None) -> TrainHistory:
    """Train on ``subset`` only, cycling over it until ``iteration_budget`` updates.

    Metrics are measured on the whole training set, as for ordinary runs.
    """
    if len(subset) == 0:
        raise ValueError("empty subset")
    return fit(model, data, cfg, state, subset=subset, iteration_budget=iteration_budget)


# ---------------------------------------------------------------------------
# loss surface


@dataclass
class SurfaceGrid:
    a: np.ndarray
    b: np.ndarray
    loss: np.ndarray      # loss[i, j] at (a[i], b[j])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["a", "b", "mean_loss"])
        for i, a in enumerate(self.a):
            for j, b in enumerate(self.b):
                w.writerow([repr(float(a)), repr(float(b)), repr(float(self.loss[i, j]))])
        return buf.getvalue()


def surface_points(x, v1, v2, a, b, lo=0.0, hi=1.0):
    """Probe point ``x + (a v1 + b v2) / 2``: the halving keeps every corner inside the budget."""
    return np.clip(x + 0.5 * (a * v1 + b * v2), lo, hi)


def loss_surface(model, x, y, epsilon, grid_n=21, rng=None, lo=0.0, hi=1.0) -> SurfaceGrid:
    """Mean loss over a grid spanned by the signed-gradient direction and a random sign direction."""
    if grid_n < 2:
        raise ValueError("grid_n must be >= 2")
    rng = rng or np.random.default_rng(0)
    x = np.asarray(x, dtype=np.float64)
    _, g = input_grad(model, x, y)
    v1 = epsilon * np.sign(g)
    v2 = epsilon * rng.choice([-1.0, 1.0], size=x.shape)
    coords = np.linspace(-1.0, 1.0, grid_n)
    if grid_n % 2:
        coords[grid_n // 2] = 0.0
    out = np.empty((grid_n, grid_n))
    for i, a in enumerate(coords):
        for j, b in enumerate(coords):
            val = model.loss(surface_points(x, v1, v2, a, b, lo, hi), y)
            if not np.isfinite(val):
                raise NonFiniteError(f"loss at ({a}, {b}) is {val}")
            out[i, j] = val
    return SurfaceGrid(coords, coords.copy(), out)


# ---------------------------------------------------------------------------
# catastrophic overfitting


@dataclass
class COEvent:
    epoch: int
    pgd_before: float     # highest PGD accuracy in the trailing window
    pgd_after: float
    fgsm_at: float


def detect_co(history, window=5, drop_thresh=0.05, fgsm_floor=0.5, fgsm=None, epochs=None):
    """First epoch where PGD accuracy falls below ``drop_thresh`` after exceeding
    ``drop_thresh + 0.2`` within the previous ``window`` epochs, while FGSM accuracy
    stays at or above ``fgsm_floor``. Returns None if there is no such epoch.

    ``history`` is a :class:`TrainHistory`, or a PGD accuracy series when
    ``fgsm`` is given.
    """
    if isinstance(history, TrainHistory):
        pgd = history.column("pgd10_acc")
        fg = history.column("fgsm_acc")
        ep = history.column("epoch").astype(int)
    else:
        if fgsm is None:
            raise ValueError("need an FGSM series alongside the PGD series")
        pgd = np.asarray(history, dtype=np.float64)
        fg = np.asarray(fgsm, dtype=np.float64)
        ep = np.arange(len(pgd)) if epochs is None else np.asarray(epochs)
    if pgd.shape != fg.shape:
        raise ValueError("PGD and FGSM series differ in length")
    if len(pgd) < 2:
        raise ValueError("need at least two epochs of history")
    for e in range(1, len(pgd)):
        prior = pgd[max(0, e - window):e]
        if pgd[e] < drop_thresh and prior.max() > drop_thresh + 0.2 and fg[e] >= fgsm_floor:
            return COEvent(int(ep[e]), float(prior.max()), float(pgd[e]), float(fg[e]))
    return None
