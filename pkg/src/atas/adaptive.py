"""Per-example state for single-step attacks with memory: squared-gradient-norm
EMA, adaptive step sizes, stored perturbations and their transforms."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .data import AugRecord, apply_aug, apply_inverse

STATE_MAGIC = b"ATASSTAT"
STATE_VERSION = 1


@dataclass
class AdaptiveConfig:
    beta: float = 0.5
    gamma: float = 16 / 255 * 0.01
    c: float = 0.01
    reset_period: int | str = 10          # epochs, or "never"
    # perturbations are stored on a side x side grid; inputs no larger than that are stored as is
    storage_side: int | str = 8

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.c <= 0:
            raise ValueError("c must be > 0")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.reset_period != "never" and (not isinstance(self.reset_period, int) or self.reset_period < 1):
            raise ValueError("reset_period must be a positive int or 'never'")
        if self.storage_side != "full" and (not isinstance(self.storage_side, int) or self.storage_side < 1):
            raise ValueError("storage_side must be 'full' or a positive int")

    @property
    def max_step(self) -> float:
        return self.gamma / self.c

    @classmethod
    def for_budget(cls, epsilon, ref_epsilon=8 / 255, ref_max_step=16 / 255, c=0.01, **kw):
        """Scale the default maximum step (16/255 at an 8/255 budget) to ``epsilon``."""
        return cls(gamma=ref_max_step * epsilon / ref_epsilon * c, c=c, **kw)


def ema_update(v_prev, grad_norm_sq, beta):
    """``beta * v_prev + (1 - beta) * grad_norm_sq``; works elementwise on arrays."""
    v_prev = np.asarray(v_prev, dtype=np.float64)
    g2 = np.asarray(grad_norm_sq, dtype=np.float64)
    if np.any(v_prev < 0) or np.any(g2 < 0):
        raise ValueError("ema_update needs non-negative inputs")
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    out = beta * v_prev + (1.0 - beta) * g2
    return float(out) if out.ndim == 0 else out


def step_size(v, gamma, c):
    """``gamma / (c + sqrt(v))``, largest (gamma / c) at v = 0."""
    if c <= 0:
        raise ValueError("c must be > 0")
    v = np.asarray(v, dtype=np.float64)
    if np.any(v < 0):
        raise ValueError("v must be >= 0")
    out = gamma / (c + np.sqrt(v))
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# resizing


@lru_cache(maxsize=64)
def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) linear interpolation weights with corner-aligned sampling."""
    if n_in < 1 or n_out < 1:
        raise ValueError("sizes must be positive")
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    pos = np.zeros(n_out) if n_out == 1 else np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - i0
    rows = np.arange(n_out)
    m[rows, i0] = 1.0 - frac
    m[rows, i0 + 1] += frac
    m.setflags(write=False)
    return m


def resize_bilinear(delta, target):
    """Per-channel bilinear resize of the last two axes to ``target = (H', W')``."""
    h, w = (int(t) for t in target)
    if h < 1 or w < 1:
        raise ValueError(f"target size {target} is empty")
    delta = np.asarray(delta, dtype=np.float64)
    if delta.ndim < 2 or 0 in delta.shape[-2:]:
        raise ValueError("delta needs positive spatial dims")
    mh = interp_matrix(delta.shape[-2], h)
    mw = interp_matrix(delta.shape[-1], w)
    return mh @ delta @ mw.T


@lru_cache(maxsize=64)
def _fit_matrix(n_full: int, n_small: int) -> np.ndarray:
    # least-squares inverse of upsampling n_small -> n_full
    m = np.linalg.pinv(interp_matrix(n_small, n_full))
    m.setflags(write=False)
    return m


def downsample_for_storage(delta, side: int, epsilon: float):
    """Coefficients on a ``side x side`` grid whose bilinear upsampling best fits ``delta``.

    This is the least-squares fit rather than plain interpolation, so that
    encode/decode is a projection: a second round trip changes nothing, and
    constant or affine fields come back exactly. Coefficients are clamped to
    the budget.
    """
    delta = np.asarray(delta, dtype=np.float64)
    ph = _fit_matrix(delta.shape[-2], side)
    pw = _fit_matrix(delta.shape[-1], side)
    return np.clip(ph @ delta @ pw.T, -epsilon, epsilon)


def upsample_from_storage(coef, shape_hw, epsilon: float):
    return np.clip(resize_bilinear(coef, shape_hw), -epsilon, epsilon)


def transform_perturbation(delta, aug: AugRecord):
    """Apply the image's crop shift and flip to its perturbation; exposed pixels become 0."""
    return apply_aug(delta, aug)


def inverse_transform_perturbation(delta, aug: AugRecord):
    return apply_inverse(delta, aug)


# ---------------------------------------------------------------------------
# the state table


class StateTable:
    """Per-example ``v``, stored perturbation and last augmentation, keyed by example id."""

    def __init__(self, n: int, input_shape, cfg: AdaptiveConfig | None = None):
        self.n = int(n)
        self.input_shape = tuple(input_shape)
        self.cfg = cfg or AdaptiveConfig()
        self.v = np.zeros(self.n)
        self._delta = None
        self.aug = None               # AugRecord of the view each delta is stored in
        self.last_reset_epoch = 0

    @property
    def initialized(self) -> bool:
        return self._delta is not None

    @property
    def storage_shape(self):
        side = self.cfg.storage_side
        C, H, W = self.input_shape
        if side == "full" or (side >= H and side >= W):
            return self.input_shape
        return (C, side, side)

    def _full(self) -> bool:
        return self.storage_shape == self.input_shape

    def init_uniform(self, epsilon, rng, epoch: int = 0):
        """``delta ~ U[-eps, eps]``, ``v = 0``."""
        self._delta = np.empty((self.n,) + self.storage_shape)
        self.v[:] = 0.0
        self.aug = AugRecord.identity(self.n, 0)
        self._fill_uniform(np.arange(self.n), epsilon, rng)
        self.last_reset_epoch = epoch

    def _fill_uniform(self, ids, epsilon, rng):
        d = rng.uniform(-epsilon, epsilon, size=(len(ids),) + self.input_shape)
        self._put(ids, d, epsilon)
        self.aug = _set_identity(self.aug, ids)

    def _put(self, ids, delta, epsilon):
        if self._full():
            self._delta[ids] = delta
        else:
            self._delta[ids] = downsample_for_storage(delta, self.storage_shape[-1], epsilon)

    def _require(self):
        if self._delta is None:
            raise RuntimeError("state table was never initialized")

    def store(self, ids, delta, epsilon, aug: AugRecord | None = None):
        """Save perturbations for ``ids``. ``aug`` names the view they live in."""
        self._require()
        ids = np.asarray(ids)
        delta = np.asarray(delta, dtype=np.float64)
        if delta.shape != (len(ids),) + self.input_shape:
            raise ValueError(f"delta shape {delta.shape} does not match {len(ids)} x {self.input_shape}")
        if np.max(np.abs(delta), initial=0.0) > epsilon + 1e-12:
            raise ValueError("delta exceeds the budget")
        # x_adv - x can overshoot the face by an ulp; store exactly within budget
        self._put(ids, np.clip(delta, -epsilon, epsilon), epsilon)
        if aug is None:
            aug = AugRecord.identity(len(ids), 0)
        self.aug = _assign(self.aug, ids, aug)

    def load(self, ids, epsilon, aug: AugRecord | None = None):
        """Stored perturbations for ``ids`` at full size, moved into the view ``aug``."""
        self._require()
        ids = np.asarray(ids)
        d = self._delta[ids]
        if self._full():
            d = d.copy()
        else:
            d = upsample_from_storage(d, self.input_shape[-2:], epsilon)
        prev = self.aug.take(ids)
        if prev.pad or prev.flip.any():
            d = inverse_transform_perturbation(d, prev)
        if aug is not None and (aug.pad or aug.flip.any()):
            d = transform_perturbation(d, aug)
        return d

    def maybe_reset(self, epoch: int, epsilon, rng) -> bool:
        period = self.cfg.reset_period
        if period == "never" or epoch - self.last_reset_epoch < period:
            return False
        self._require()
        self._fill_uniform(np.arange(self.n), epsilon, rng)
        self.last_reset_epoch = epoch
        return True

    # snapshot ----------------------------------------------------------------

    def save(self, path) -> None:
        self._require()
        out = bytearray(STATE_MAGIC) + struct.pack("<B", STATE_VERSION)
        shape = self.storage_shape
        head = struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)
        for i in range(self.n):
            out += struct.pack("<Qd", i, self.v[i]) + head
            out += np.ascontiguousarray(self._delta[i], dtype="<f8").tobytes()
        Path(path).write_bytes(bytes(out))

    def restore(self, path) -> None:
        """Load a snapshot written by :meth:`save`; augmentation views reset to identity."""
        buf = Path(path).read_bytes()
        if buf[:8] != STATE_MAGIC:
            raise ValueError("not an ATASSTAT file")
        if buf[8] != STATE_VERSION:
            raise ValueError(f"unsupported state version {buf[8]}")
        off = 9
        self._delta = np.zeros((self.n,) + self.storage_shape)
        while off < len(buf):
            i, v = struct.unpack_from("<Qd", buf, off)
            off += 16
            nd = buf[off]
            shape = struct.unpack_from(f"<{nd}I", buf, off + 1)
            off += 1 + 4 * nd
            if tuple(shape) != self.storage_shape or i >= self.n:
                raise ValueError(f"record {i} does not fit this table")
            k = int(np.prod(shape))
            if off + 8 * k > len(buf):
                raise ValueError(f"truncated record {i}")
            self._delta[i] = np.frombuffer(buf, "<f8", k, off).reshape(shape)
            self.v[i] = v
            off += 8 * k
        self.aug = AugRecord.identity(self.n, 0)


def _assign(table: AugRecord, ids, rec: AugRecord) -> AugRecord:
    pad = max(table.pad, rec.pad)
    # offsets are stored relative to the pad; re-centre both sides to ``pad``
    flip = table.flip.copy()
    dy = table.dy - table.pad + pad
    dx = table.dx - table.pad + pad
    flip[ids] = rec.flip
    dy[ids] = rec.dy - rec.pad + pad
    dx[ids] = rec.dx - rec.pad + pad
    return AugRecord(flip, dy, dx, pad)


def _set_identity(table: AugRecord, ids) -> AugRecord:
    return _assign(table, ids, AugRecord.identity(len(ids), table.pad))
