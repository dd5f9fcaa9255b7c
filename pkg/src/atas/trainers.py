"""Adversarial training loops (PGD-AT, FGSM-RS, ATTA, ATAS, plain) and robust evaluation."""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .adaptive import AdaptiveConfig, StateTable, ema_update, step_size
from .attacks import (AttackSpec, fgsm, input_grad, pgd, pgd_eval_spec, project_box,
                      random_start, sign_step, snap_to_budget)
from .autodiff import NonFiniteError
from .data import Dataset, augment

METHODS = ("clean", "pgd_at", "fgsm_rs", "atta", "atas")


class TrainingAborted(RuntimeError):
    def __init__(self, msg, history):
        super().__init__(msg)
        self.history = history


class BudgetViolation(AssertionError):
    pass


@dataclass
class TrainConfig:
    method: str = "atas"
    epochs: int = 15
    batch_size: int = 128
    lr: float = 0.1
    lr_milestones: tuple = (0.8, 0.93)   # fractions of the run where lr is multiplied by lr_decay
    lr_decay: float = 0.1
    epsilon: float = 0.3
    alpha: float | None = None           # fixed step; defaults depend on method
    pgd_steps: int = 10                  # pgd_at inner iterations
    adaptive: AdaptiveConfig | None = None
    init_point: str = "previous"         # atas only: "previous" perturbation or a "random" start
    augment: bool = False
    pad: int = 2
    eval_size: int = 1000
    eval_pgd50: bool = False
    lo: float = 0.0
    hi: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.init_point not in ("previous", "random"):
            raise ValueError("init_point must be 'previous' or 'random'")
        if self.alpha is None:
            self.alpha = {"fgsm_rs": 1.25 * self.epsilon, "atta": 0.5 * self.epsilon,
                          "pgd_at": 0.25 * self.epsilon}.get(self.method)
        if self.alpha is not None and self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.method == "atas":
            if self.adaptive is None:
                self.adaptive = AdaptiveConfig.for_budget(self.epsilon)
        self.lr_milestones = tuple(self.lr_milestones)

    def lr_at(self, epoch: int) -> float:
        passed = sum(epoch >= round(m * self.epochs) for m in self.lr_milestones)
        return self.lr * self.lr_decay ** passed

    @property
    def uses_state(self) -> bool:
        return self.method == "atta" or (self.method == "atas" and self.init_point == "previous")


@dataclass
class MetricsRecord:
    epoch: int
    clean_acc: float
    fgsm_acc: float
    pgd10_acc: float
    train_robust_loss: float
    mean_step_size: float
    mean_grad_norm: float
    pgd50_acc: float | None = None


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    grad_norms: np.ndarray | None = None   # (epochs, n), NaN where an example was not visited
    step_sizes: np.ndarray | None = None   # (epochs, n)
    wall_s: list = field(default_factory=list)
    iterations: int = 0
    failure: str | None = None
    state: StateTable | None = None

    def column(self, name) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    def metrics_csv(self) -> str:
        return metrics_to_csv(self.records)

    def timing_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "wall_s"])
        for r, t in zip(self.records, self.wall_s):
            w.writerow([r.epoch, f"{t:.3f}"])
        return buf.getvalue()


METRIC_COLUMNS = ["epoch", "clean_acc", "fgsm_acc", "pgd10_acc", "pgd50_acc",
                  "train_robust_loss", "mean_step_size", "mean_grad_norm"]


def metrics_to_csv(records) -> str:
    cols = [c for c in METRIC_COLUMNS
            if c != "pgd50_acc" or any(r.pgd50_acc is not None for r in records)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in records:
        w.writerow([_fmt(getattr(r, c)) for c in cols])
    return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


# ---------------------------------------------------------------------------
# evaluation


def evaluate_robust(model, data: Dataset, attack: AttackSpec, batch: int = 250, rng=None):
    """Fraction of ``data`` still classified correctly after ``attack`` (PGD with its spec)."""
    return _attacked(model, data.images, data.labels, attack, batch, rng)[0]


def _attacked(model, x, y, attack: AttackSpec, batch=250, rng=None, want_loss=False):
    correct, loss_sum = 0, 0.0
    for s in range(0, len(y), batch):
        xb, yb = x[s:s + batch], y[s:s + batch]
        if attack.epsilon > 0:
            xb = pgd(model, xb, yb, attack, rng)
        if want_loss:
            loss_sum += model.loss(xb, yb) * len(yb)
        correct += int((model.predict(xb) == yb).sum())
    n = max(len(y), 1)
    return correct / n, loss_sum / n


def _fgsm_acc(model, x, y, spec, batch=250):
    if spec.epsilon == 0:
        return _attacked(model, x, y, spec, batch)[0]
    correct = 0
    for s in range(0, len(y), batch):
        xb, yb = x[s:s + batch], y[s:s + batch]
        correct += int((model.predict(fgsm(model, xb, yb, spec)) == yb).sum())
    return correct / max(len(y), 1)


def eval_rng(seed, epoch):
    """Random starts for evaluation attacks; fixed per (seed, epoch) so metrics replay exactly."""
    return np.random.default_rng([int(seed), int(epoch), 7])


def epoch_metrics(model, x, y, cfg: TrainConfig, epoch, step_sizes, grad_norms) -> MetricsRecord:
    eps, lo, hi = cfg.epsilon, cfg.lo, cfg.hi
    rng = eval_rng(cfg.seed, epoch)
    clean, _ = _attacked(model, x, y, AttackSpec(0.0, lo=lo, hi=hi))
    fg = _fgsm_acc(model, x, y, AttackSpec(eps, lo=lo, hi=hi))
    p10, rl = _attacked(model, x, y, pgd_eval_spec(eps, 10, lo, hi), rng=rng, want_loss=True)
    p50 = _attacked(model, x, y, pgd_eval_spec(eps, 50, lo, hi), rng=rng)[0] if cfg.eval_pgd50 else None
    return MetricsRecord(epoch, clean, fg, p10, rl, _nanmean(step_sizes), _nanmean(grad_norms), p50)


def _nanmean(a):
    a = np.asarray(a, dtype=np.float64)
    a = a[~np.isnan(a)]
    return float(a.mean()) if a.size else 0.0


# ---------------------------------------------------------------------------
# training


def streams(seed):
    """Independent generators for shuffling, attack noise, augmentation and evaluation."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]


class _BatchStream:
    """Endless reshuffled passes over ``pool``; partial batches close each pass."""

    def __init__(self, pool, batch_size, rng):
        self.pool = np.asarray(pool)
        self.bs = batch_size
        self.rng = rng
        self._order = None
        self._pos = 0

    def next(self):
        if self._order is None or self._pos >= len(self._order):
            self._order = self.pool[self.rng.permutation(len(self.pool))]
            self._pos = 0
        b = self._order[self._pos:self._pos + self.bs]
        self._pos += self.bs
        return b


def _check_budget(x_adv, x, cfg):
    dev = np.max(np.abs(x_adv - x), initial=0.0)
    if dev > cfg.epsilon + 1e-12 or x_adv.min(initial=cfg.lo) < cfg.lo or x_adv.max(initial=cfg.hi) > cfg.hi:
        raise BudgetViolation(f"adversarial batch leaves the budget (max deviation {dev})")


def _per_example_norms(gx):
    # gx is the gradient of the batch mean, so scale back by B
    return np.sqrt(np.sum(gx.reshape(gx.shape[0], -1) ** 2, axis=1)) * gx.shape[0]


def _expand(a, x):
    return np.asarray(a).reshape((-1,) + (1,) * (x.ndim - 1))


def _attack(model, x, y, ids, cfg, state, noise, aug_rec):
    """Return (x_adv, per-example grad norm at the start point, per-example step)."""
    eps, lo, hi = cfg.epsilon, cfg.lo, cfg.hi
    B = len(ids)
    m = cfg.method
    if m == "clean":
        return x, np.full(B, np.nan), np.zeros(B)
    if m in ("fgsm_rs", "pgd_at") or (m == "atas" and not cfg.uses_state):
        x0 = random_start(x, eps, noise, lo, hi)
    else:
        x0 = project_box(x + state.load(ids, eps, aug_rec), x, eps, lo, hi)
    _, g = input_grad(model, x0, y)
    gn = _per_example_norms(g)
    if m == "atas":
        v = ema_update(state.v[ids], gn ** 2, cfg.adaptive.beta)
        if not np.all(np.isfinite(v)):
            raise NonFiniteError("non-finite gradient-norm average")
        state.v[ids] = v
        alpha = step_size(v, cfg.adaptive.gamma, cfg.adaptive.c)
    else:
        alpha = np.full(B, cfg.alpha)
    x_adv = project_box(sign_step(x0, g, _expand(alpha, x0)), x, eps, lo, hi)
    if m == "pgd_at":
        for _ in range(cfg.pgd_steps - 1):
            _, g = input_grad(model, x_adv, y)
            x_adv = project_box(sign_step(x_adv, g, cfg.alpha), x, eps, lo, hi)
        x_adv = snap_to_budget(x_adv, x, eps, lo, hi)
    if cfg.uses_state:
        state.store(ids, x_adv - x, eps, aug_rec)
    return x_adv, gn, alpha


def make_state(cfg: TrainConfig, n, input_shape):
    if not cfg.uses_state and cfg.method != "atas":
        return None
    return StateTable(n, input_shape, cfg.adaptive or AdaptiveConfig())


def fit(model, data: Dataset, cfg: TrainConfig, state: StateTable | None = None,
        subset=None, iteration_budget: int | None = None, eval_ids=None) -> TrainHistory:
    """Shared training loop behind every ``train_*`` entry point.

    ``subset`` restricts the examples drawn for updates; ``iteration_budget``
    fixes the total number of parameter updates, spread evenly over epochs.
    Metrics are always computed on ``eval_ids`` of the full dataset.
    """
    n = len(data)
    shuffle_rng, noise_rng, aug_rng, eval_rng = streams(cfg.seed)
    pool = np.arange(n) if subset is None else np.unique(np.asarray(subset))
    if pool.size == 0:
        raise ValueError("empty training subset")
    if eval_ids is None:
        k = min(cfg.eval_size, n)
        eval_ids = np.sort(eval_rng.permutation(n)[:k])
    ex, ey = data.images[eval_ids], data.labels[eval_ids]

    per_pass = math.ceil(len(pool) / cfg.batch_size)
    total = per_pass * cfg.epochs if iteration_budget is None else int(iteration_budget)
    if total < cfg.epochs:
        raise ValueError("iteration budget smaller than the number of epochs")
    iters = [total // cfg.epochs + (e < total % cfg.epochs) for e in range(cfg.epochs)]

    if state is None:
        state = make_state(cfg, n, data.input_shape)
    if state is not None and cfg.uses_state and not state.initialized:
        state.init_uniform(cfg.epsilon, noise_rng)
    elif state is not None and not state.initialized:
        state.v[:] = 0.0

    hist = TrainHistory(grad_norms=np.full((cfg.epochs, n), np.nan),
                        step_sizes=np.full((cfg.epochs, n), np.nan))
    stream = _BatchStream(pool, cfg.batch_size, shuffle_rng)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        if state is not None and cfg.uses_state:
            state.maybe_reset(epoch, cfg.epsilon, noise_rng)
        lr = cfg.lr_at(epoch)
        try:
            for _ in range(iters[epoch]):
                ids = stream.next()
                x, y = data.images[ids], data.labels[ids]
                rec = None
                if cfg.augment:
                    x, rec = augment(x, cfg.pad, aug_rng)
                x_adv, gn, alpha = _attack(model, x, y, ids, cfg, state, noise_rng, rec)
                _check_budget(x_adv, x, cfg)
                hist.grad_norms[epoch, ids] = gn
                hist.step_sizes[epoch, ids] = alpha
                loss, grads, _ = model.loss_and_grads(x_adv, y)
                if not math.isfinite(loss):
                    raise NonFiniteError(f"loss {loss}")
                model.params.sgd_step(grads, lr)
                hist.iterations += 1
        except NonFiniteError as e:
            hist.failure = f"epoch {epoch}: {e}"
            raise TrainingAborted(f"{cfg.method} diverged at epoch {epoch}: {e}", hist) from e
        hist.records.append(epoch_metrics(model, ex, ey, cfg, epoch,
                                          hist.step_sizes[epoch], hist.grad_norms[epoch]))
        hist.wall_s.append(time.perf_counter() - t0)
    hist.state = state
    return hist


def _with_method(cfg, method):
    if cfg.method != method:
        raise ValueError(f"config is for {cfg.method!r}, not {method!r}")
    return cfg


def train_clean(model, data, cfg, **kw):
    return fit(model, data, _with_method(cfg, "clean"), **kw)


def train_pgd_at(model, data, cfg, **kw):
    return fit(model, data, _with_method(cfg, "pgd_at"), **kw)


def train_fgsm_rs(model, data, cfg, **kw):
    return fit(model, data, _with_method(cfg, "fgsm_rs"), **kw)


def train_atta(model, data, cfg, state=None, **kw):
    return fit(model, data, _with_method(cfg, "atta"), state, **kw)


def train_atas(model, data, cfg, state=None, **kw):
    return fit(model, data, _with_method(cfg, "atas"), state, **kw)


TRAINERS = {"clean": train_clean, "pgd_at": train_pgd_at, "fgsm_rs": train_fgsm_rs,
            "atta": train_atta, "atas": train_atas}
