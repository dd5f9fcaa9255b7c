"""Small differentiable classifiers built on :mod:`atas.autodiff`."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Graph, ShapeError, backward, forward

CKPT_MAGIC = b"ATASCKPT"
CKPT_VERSION = 1


@dataclass
class ModelConfig:
    kind: str = "cnn"                     # "mlp" or "cnn"
    input_shape: tuple = (1, 28, 28)
    widths: tuple = (100,)                # mlp hidden widths
    channels: tuple = (16, 32)            # cnn conv plan, each block conv3x3 -> relu -> pool
    num_classes: int = 10
    seed: int = 0

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.widths = tuple(int(w) for w in self.widths)
        self.channels = tuple(int(c) for c in self.channels)
        if self.kind not in ("mlp", "cnn"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if any(s <= 0 for s in self.input_shape + self.widths + self.channels):
            raise ValueError("all sizes must be positive")
        if self.kind == "cnn":
            if len(self.input_shape) != 3:
                raise ShapeError("cnn needs a (C, H, W) input shape")
            k = 2 ** len(self.channels)
            if self.input_shape[1] % k or self.input_shape[2] % k:
                raise ShapeError(f"cnn spatial dims must be divisible by {k}")


@dataclass
class Parameters:
    tensors: dict[str, np.ndarray]
    version: int = 0

    def __getitem__(self, k):
        return self.tensors[k]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "Parameters":
        return Parameters({k: v.copy() for k, v in self.tensors.items()}, self.version)

    def sgd_step(self, grads: dict, lr: float) -> None:
        for k, g in grads.items():
            if g.shape != self.tensors[k].shape:
                raise ShapeError(f"gradient for {k} has shape {g.shape}")
            self.tensors[k] -= lr * g
        self.version += 1


def _he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Model:
    """A classifier whose loss is the batch-mean softmax cross-entropy."""

    def __init__(self, config: ModelConfig, params: Parameters, graph: Graph,
                 x_node: int, y_node: int, logits_node: int, param_nodes: dict):
        self.config = config
        self.params = params
        self._graph = graph
        self._x = x_node
        self._y = y_node
        self._logits = logits_node
        self._param_nodes = param_nodes

    @property
    def input_shape(self):
        return self.config.input_shape

    def _bind(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != tuple(self.input_shape):
            raise ShapeError(f"batch shape {x.shape[1:]} != model input {self.input_shape}")
        b = {node: self.params[name] for name, node in self._param_nodes.items()}
        b[self._x] = x.reshape((x.shape[0],) + self._feed_shape)
        b[self._y] = np.zeros(x.shape[0], dtype=np.int64) if y is None else np.asarray(y)
        return b

    @property
    def _feed_shape(self):
        if self.config.kind == "mlp":
            return (int(np.prod(self.input_shape)),)
        return tuple(self.input_shape)

    def logits(self, x) -> np.ndarray:
        vals = forward(self._graph, self._bind(x, None))
        return vals[self._logits]

    def loss_and_grads(self, x, y, need_input_grad: bool = False):
        """Return ``(loss, grads, grad_x)``; ``grad_x`` is None unless requested."""
        y = np.asarray(y)
        if y.ndim != 1 or y.shape[0] != np.shape(x)[0]:
            raise ShapeError("labels must be a vector matching the batch")
        vals = forward(self._graph, self._bind(x, y))
        wrt = list(self._param_nodes.values()) + ([self._x] if need_input_grad else [])
        g = backward(self._graph, vals, wrt=wrt)
        grads = {name: g[node] for name, node in self._param_nodes.items()}
        gx = g[self._x].reshape(np.shape(x)) if need_input_grad else None
        return float(vals[self._graph.loss]), grads, gx

    def loss(self, x, y) -> float:
        vals = forward(self._graph, self._bind(x, y))
        return float(vals[self._graph.loss])

    def predict(self, x) -> np.ndarray:
        # argmax returns the first maximum, i.e. ties go to the lowest class
        return self.logits(x).argmax(axis=1)


def _build_mlp(cfg, rng):
    g = Graph()
    x = g.input("x")
    y = g.const("y")
    sizes = [int(np.prod(cfg.input_shape)), *cfg.widths, cfg.num_classes]
    tensors, nodes = {}, {}
    h = x
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        wn, bn = f"fc{i}.w", f"fc{i}.b"
        tensors[wn] = _he_uniform(rng, (a, b), a)
        tensors[bn] = np.zeros(b)
        nodes[wn], nodes[bn] = g.param(wn), g.param(bn)
        h = g.add(g.matmul(h, nodes[wn]), nodes[bn])
        if i < len(sizes) - 2:
            h = g.relu(h)
    g.set_loss(g.softmax_xent(h, y))
    return g, x, y, h, tensors, nodes


def _build_cnn(cfg, rng):
    g = Graph()
    x = g.input("x")
    y = g.const("y")
    tensors, nodes = {}, {}
    c_in, H, W = cfg.input_shape
    h = g.swap01(x)
    for i, c_out in enumerate(cfg.channels):
        wn, bn = f"conv{i}.w", f"conv{i}.b"
        tensors[wn] = _he_uniform(rng, (c_out, c_in, 3, 3), c_in * 9)
        tensors[bn] = np.zeros((c_out, 1, 1, 1))
        nodes[wn], nodes[bn] = g.param(wn), g.param(bn)
        # conv -> relu -> pool, evaluated as conv -> pool -> bias -> relu: the
        # same function (bias is per channel, relu is monotone) on 4x fewer values
        h = g.maxpool2d(g.conv2d(h, nodes[wn], stride=1, padding=1, layout="cbhw"))
        h = g.relu(g.add(h, nodes[bn]))
        c_in, H, W = c_out, H // 2, W // 2
    h = g.flatten(h, layout="cbhw")
    fan = c_in * H * W
    tensors["fc.w"] = _he_uniform(rng, (fan, cfg.num_classes), fan)
    tensors["fc.b"] = np.zeros(cfg.num_classes)
    nodes["fc.w"], nodes["fc.b"] = g.param("fc.w"), g.param("fc.b")
    h = g.add(g.matmul(h, nodes["fc.w"]), nodes["fc.b"])
    g.set_loss(g.softmax_xent(h, y))
    return g, x, y, h, tensors, nodes


def build(config: ModelConfig) -> Model:
    """Construct a model with He-uniform weights and zero biases drawn from ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    builder = _build_mlp if config.kind == "mlp" else _build_cnn
    g, x, y, logits, tensors, nodes = builder(config, rng)
    return Model(config, Parameters(tensors), g, x, y, logits, nodes)


class LinearScoreModel:
    """Loss is the batch mean of ``w . x``; gradient sign is ``sgn(w)`` everywhere.

    Only exposes the attack-facing surface (``loss`` and ``loss_and_grads``).
    """

    def __init__(self, w):
        self.w = np.asarray(w, dtype=np.float64)
        self.input_shape = self.w.shape
        g = Graph()
        x = g.input("x")
        w_node = g.param("w")
        g.set_loss(g.scale(g.sum(g.mul(x, w_node)), 1.0))
        self._graph, self._x, self._w = g, x, w_node

    def loss_and_grads(self, x, y=None, need_input_grad: bool = False):
        x = np.asarray(x, dtype=np.float64)
        self._graph.nodes[self._graph.loss].attrs["c"] = 1.0 / x.shape[0]
        vals = forward(self._graph, {self._x: x, self._w: self.w})
        g = backward(self._graph, vals)
        return float(vals[self._graph.loss]), {"w": g[self._w]}, (g[self._x] if need_input_grad else None)

    def loss(self, x, y=None) -> float:
        return self.loss_and_grads(x, y)[0]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: Parameters) -> None:
    """Write ``params`` as (name, shape, f64 little-endian data) records."""
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<BQI", CKPT_VERSION, params.version, len(params.tensors))
    for name, t in params.items():
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
        out += np.ascontiguousarray(t, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> Parameters:
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise ValueError("not an ATASCKPT file")
    version, pver, count = struct.unpack_from("<BQI", buf, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 8 + struct.calcsize("<BQI")
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + ln].decode("utf-8")
        off += ln
        (nd,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{nd}I", buf, off)
        off += 4 * nd
        n = int(np.prod(shape)) * 8
        if off + n > len(buf):
            raise ValueError(f"truncated checkpoint: tensor {name} needs {n} bytes")
        tensors[name] = np.frombuffer(buf, dtype="<f8", count=n // 8, offset=off).reshape(shape).copy()
        off += n
    return Parameters(tensors, pver)


def load_into(model: Model, params: Parameters) -> None:
    for k, v in params.items():
        if k not in model.params.tensors or model.params[k].shape != v.shape:
            raise ShapeError(f"checkpoint tensor {k} does not fit the model")
    model.params = params.copy()
