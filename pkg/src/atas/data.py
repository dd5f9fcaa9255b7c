"""Datasets: synthetic blob images, IDX (MNIST family) and CIFAR-10 binary batches,
plus crop/flip augmentation with replayable records."""
from __future__ import annotations

import gzip
import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_RECORD = 3073


class FormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray          # (N, C, H, W) in [0, 1]
    labels: np.ndarray          # (N,) int64
    num_classes: int = 10
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"images {self.images.shape} do not match labels {self.labels.shape}")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of range")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def input_shape(self):
        return self.images.shape[1:]

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(repr((self.images.shape, self.num_classes)).encode())
        h.update(np.ascontiguousarray(self.images, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()[:16]

    def subset(self, ids) -> "Dataset":
        ids = np.asarray(ids)
        return Dataset(self.images[ids], self.labels[ids], self.num_classes, self.split)


# ---------------------------------------------------------------------------
# synthetic data


def synth_generate(num_classes=10, per_class=100, image_size=28, channels=1,
                   noise=0.3, seed=0, blobs=6, gain=3.0, split="train") -> Dataset:
    """Class-conditional Gaussian-blob images.

    Every class owns ``blobs`` bump centres and widths. Samples jitter the
    centres, rescale amplitudes and add pixel noise, all proportional to
    ``noise``; at ``noise=0`` each class is a single fixed image. ``gain``
    saturates the bumps into near-binary plateaus, like pen strokes.
    """
    rng = np.random.default_rng(seed)
    lo, hi = 0.2 * image_size, 0.8 * image_size
    centres = rng.uniform(lo, hi, size=(num_classes, blobs, 2))
    widths = rng.uniform(0.06, 0.12, size=(num_classes, blobs)) * image_size
    tint = rng.uniform(0.5, 1.0, size=(num_classes, blobs, channels))

    n = num_classes * per_class
    labels = np.repeat(np.arange(num_classes), per_class)
    labels = labels[rng.permutation(n)]
    grid = np.arange(image_size, dtype=np.float64)
    c = centres[labels] + noise * 0.08 * image_size * rng.standard_normal((n, blobs, 2))
    amp = 1.0 - noise * 0.5 * rng.uniform(size=(n, blobs))
    gy = np.exp(-0.5 * ((grid[None, None, :] - c[..., 0:1]) / widths[labels][..., None]) ** 2)
    gx = np.exp(-0.5 * ((grid[None, None, :] - c[..., 1:2]) / widths[labels][..., None]) ** 2)
    bumps = amp[..., None, None] * gy[..., :, None] * gx[..., None, :]   # n, blobs, H, W
    img = gain * np.einsum("nbhw,nbc->nchw", bumps, tint[labels])
    img += noise * 0.15 * rng.standard_normal(img.shape)
    return Dataset(np.clip(img, 0.0, 1.0), labels, num_classes, split)


# ---------------------------------------------------------------------------
# IDX


def parse_idx(buf: bytes) -> np.ndarray:
    """Decode an unsigned-byte IDX file.

    Images (magic 0x00000803) come back as floats scaled to [0, 1], labels
    (0x00000801) as int64.
    """
    if len(buf) < 4:
        raise FormatError("missing IDX header")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic >> 16 != 0 or (magic >> 8) & 0xFF != 0x08 or not 1 <= magic & 0xFF <= 4:
        raise FormatError(f"bad IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    if len(buf) < 4 + 4 * ndim:
        raise FormatError("truncated IDX header")
    dims = struct.unpack(f">{ndim}I", buf[4:4 + 4 * ndim])
    expected = int(np.prod(dims))
    payload = buf[4 + 4 * ndim:]
    if len(payload) < expected:
        raise FormatError(f"truncated IDX payload: expected {expected} bytes, got "
                          f"{len(payload)} ({expected - len(payload)} missing)")
    arr = np.frombuffer(payload, dtype=np.uint8, count=expected).reshape(dims)
    if magic == IDX_LABELS:
        return arr.astype(np.int64)
    return arr.astype(np.float64) / 255.0


def write_idx(arr) -> bytes:
    """Inverse of :func:`parse_idx`. Float arrays are taken as pixels in [0, 1]."""
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        data = np.rint(np.clip(arr, 0, 1) * 255).astype(np.uint8)
    else:
        data = arr.astype(np.uint8)
    magic = 0x00000800 | data.ndim
    return struct.pack(f">I{data.ndim}I", magic, *data.shape) + data.tobytes()


def _read(path: Path) -> bytes:
    raw = path.read_bytes()
    return gzip.decompress(raw) if path.suffix == ".gz" else raw


def data_dir(explicit=None) -> Path | None:
    d = explicit or os.environ.get("ATAS_DATA_DIR")
    return Path(d) if d else None


def load_mnist(directory, split="train", limit=None, num_classes=10) -> Dataset:
    """Read ``{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]`` from ``directory``."""
    directory = Path(directory)
    prefix = "train" if split == "train" else "t10k"

    def find(stem):
        for name in (stem, stem + ".gz"):
            if (directory / name).exists():
                return directory / name
        raise FileNotFoundError(f"{stem} not found in {directory}")

    images = parse_idx(_read(find(f"{prefix}-images-idx3-ubyte")))
    labels = parse_idx(_read(find(f"{prefix}-labels-idx1-ubyte")))
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    return Dataset(images[:, None], labels, num_classes, split)


def write_mnist(directory, ds: Dataset, split="train") -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    prefix = "train" if split == "train" else "t10k"
    (directory / f"{prefix}-images-idx3-ubyte").write_bytes(write_idx(ds.images[:, 0]))
    (directory / f"{prefix}-labels-idx1-ubyte").write_bytes(write_idx(ds.labels))


# ---------------------------------------------------------------------------
# CIFAR-10 binary batches


def parse_cifar_bin(buf: bytes, split="train") -> Dataset:
    if len(buf) % CIFAR_RECORD:
        raise FormatError(f"length {len(buf)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise FormatError(f"record {bad} has label byte {labels[bad]} > 9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(images, labels, 10, split)


def write_cifar_bin(ds: Dataset) -> bytes:
    px = np.rint(ds.images * 255).astype(np.uint8).reshape(len(ds), -1)
    return np.concatenate([ds.labels.astype(np.uint8)[:, None], px], axis=1).tobytes()


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugRecord:
    """Per-example crop offsets into the zero-padded image, then an optional flip."""
    flip: np.ndarray      # (B,) bool
    dy: np.ndarray        # (B,) int in [0, 2 * pad]
    dx: np.ndarray
    pad: int

    def __post_init__(self):
        self.flip = np.asarray(self.flip, dtype=bool)
        self.dy = np.asarray(self.dy, dtype=np.int64)
        self.dx = np.asarray(self.dx, dtype=np.int64)
        for off in (self.dy, self.dx):
            if off.size and (off.min() < 0 or off.max() > 2 * self.pad):
                raise ValueError(f"crop offsets must lie in [0, {2 * self.pad}]")

    @classmethod
    def identity(cls, n, pad=0):
        return cls(np.zeros(n, bool), np.full(n, pad), np.full(n, pad), pad)

    def take(self, ids) -> "AugRecord":
        return AugRecord(self.flip[ids], self.dy[ids], self.dx[ids], self.pad)

    def inverse(self) -> "AugRecord":
        """Offsets undoing the shift. Use :func:`apply_inverse`, which also unflips first."""
        return AugRecord(self.flip, 2 * self.pad - self.dy, 2 * self.pad - self.dx, self.pad)


def apply_aug(batch, rec: AugRecord):
    """Replay a recorded crop/flip. Revealed regions are zero."""
    batch = np.asarray(batch, dtype=np.float64)
    p = rec.pad
    H, W = batch.shape[-2:]
    if p:
        padded = np.pad(batch, [(0, 0)] * (batch.ndim - 2) + [(p, p), (p, p)])
        out = np.empty_like(batch)
        for i in range(batch.shape[0]):
            out[i] = padded[i, ..., rec.dy[i]:rec.dy[i] + H, rec.dx[i]:rec.dx[i] + W]
    else:
        out = batch.copy()
    out[rec.flip] = out[rec.flip][..., ::-1]
    return out


def apply_inverse(batch, rec: AugRecord):
    """Undo :func:`apply_aug` up to the pixels it cropped away."""
    batch = np.asarray(batch, dtype=np.float64).copy()
    batch[rec.flip] = batch[rec.flip][..., ::-1]
    inv = rec.inverse()
    return apply_aug(batch, AugRecord(np.zeros_like(rec.flip), inv.dy, inv.dx, rec.pad))


def augment(batch, pad, rng, flip_prob=0.5):
    """Random horizontal flip and random crop after zero-padding by ``pad``."""
    if pad < 0:
        raise ValueError("pad must be >= 0")
    n = np.shape(batch)[0]
    flip = rng.uniform(size=n) < flip_prob
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    rec = AugRecord(flip, dy, dx, pad)
    return apply_aug(batch, rec), rec
