"""Static compute graphs with reverse-mode differentiation over numpy float64 arrays.

A graph is a topologically ordered list of nodes. Leaves are bound at
``forward`` time; ``backward`` walks the list in reverse and returns
gradients for every parameter and input leaf.

    g = Graph()
    x = g.input("x")
    y = g.mul(x, x)
    g.set_loss(g.sum(y))
    vals = forward(g, {x: np.array([3.0])})
    grads = backward(g, vals)        # {x: array([6.])}
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _kernels as _k


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GraphError(RuntimeError):
    pass


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...] = ()
    attrs: dict = field(default_factory=dict)
    name: str | None = None


LEAF_KINDS = ("input", "param", "const")


class Graph:
    """Builder for a compute graph. Methods return integer node ids."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.loss: int | None = None

    def _add(self, op, inputs=(), name=None, **attrs) -> int:
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise GraphError(f"node {i} does not precede new {op!r} node")
        self.nodes.append(Node(op, tuple(inputs), attrs, name))
        return len(self.nodes) - 1

    # leaves
    def input(self, name=None) -> int:
        return self._add("input", name=name)

    def param(self, name=None) -> int:
        return self._add("param", name=name)

    def const(self, name=None) -> int:
        """Leaf that is never differentiated (labels, masks)."""
        return self._add("const", name=name)

    # ops
    def matmul(self, a, b):
        return self._add("matmul", (a, b))

    def add(self, a, b):
        return self._add("add", (a, b))

    def mul(self, a, b):
        return self._add("mul", (a, b))

    def scale(self, a, c: float):
        return self._add("scale", (a,), c=float(c))

    def relu(self, a):
        return self._add("relu", (a,))

    def conv2d(self, x, w, stride: int = 1, padding: int = 0, layout: str = "bchw"):
        """2-D cross-correlation. ``layout="cbhw"`` keeps activations channel-major."""
        if stride not in (1, 2):
            raise ValueError("conv2d supports stride 1 or 2")
        if layout not in ("bchw", "cbhw"):
            raise ValueError(f"unknown layout {layout!r}")
        return self._add("conv2d", (x, w), stride=stride, padding=padding, layout=layout)

    def maxpool2d(self, x):
        """2x2 max-pool with stride 2 over the last two axes."""
        return self._add("maxpool2d", (x,))

    def swap01(self, x):
        """Exchange the first two axes (BCHW <-> CBHW)."""
        return self._add("swap01", (x,))

    def flatten(self, x, layout: str = "bchw"):
        return self._add("flatten", (x,), layout=layout)

    def sum(self, a):
        return self._add("sum", (a,))

    def softmax_xent(self, logits, labels):
        """Mean cross-entropy. ``labels`` holds class indices or target rows."""
        return self._add("softmax_xent", (logits, labels))

    def set_loss(self, node: int) -> None:
        self.loss = node

    @property
    def params(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.op == "param"]

    @property
    def inputs(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.op == "input"]

    def leaves(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.op in LEAF_KINDS]


# ---------------------------------------------------------------------------
# op kernels
#   forward(vals, attrs, ctx) -> out
#   vjp(vals, out, g, attrs, ctx, need) -> one gradient (or None) per input
# ctx is a per-node scratch dict filled by forward and reused by vjp.


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def _matmul_fwd(vals, attrs, ctx):
    a, b = vals
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return a @ b


def _matmul_vjp(vals, out, g, attrs, ctx, need):
    a, b = vals
    return (g @ b.T if need[0] else None), (a.T @ g if need[1] else None)


def _add_fwd(vals, attrs, ctx):
    a, b = vals
    _broadcast_shape(a, b, "add")
    return a + b


def _add_vjp(vals, out, g, attrs, ctx, need):
    a, b = vals
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _mul_fwd(vals, attrs, ctx):
    a, b = vals
    _broadcast_shape(a, b, "mul")
    return a * b


def _mul_vjp(vals, out, g, attrs, ctx, need):
    a, b = vals
    return (_unbroadcast(g * b, a.shape) if need[0] else None,
            _unbroadcast(g * a, b.shape) if need[1] else None)


def _scale_fwd(vals, attrs, ctx):
    return vals[0] * attrs["c"]


def _scale_vjp(vals, out, g, attrs, ctx, need):
    return (g * attrs["c"],)


def _relu_fwd(vals, attrs, ctx):
    return np.maximum(vals[0], 0.0)


def _relu_vjp(vals, out, g, attrs, ctx, need):
    # subgradient 0 at the kink
    return (g * (vals[0] > 0),)


def _conv2d_fwd(vals, attrs, ctx):
    x, w = vals
    cm = attrs.get("layout", "bchw") == "cbhw"
    cin = x.shape[0] if cm else x.shape[1] if x.ndim > 1 else None
    if x.ndim != 4 or w.ndim != 4 or cin != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} vs kernel {w.shape}")
    p = attrs["padding"]
    if x.shape[2] + 2 * p < w.shape[2] or x.shape[3] + 2 * p < w.shape[3]:
        raise ShapeError(f"conv2d: kernel {w.shape[2:]} larger than padded input")
    F = w.shape[0]
    xt = x if cm else x.transpose(1, 0, 2, 3)
    cols = _k.im2col(np.ascontiguousarray(xt), w.shape[2], w.shape[3], attrs["stride"], p)
    ctx["cols"] = cols
    B, Ho, Wo = cols.shape[3:]
    out = (w.reshape(F, -1) @ cols.reshape(-1, B * Ho * Wo)).reshape(F, B, Ho, Wo)
    return out if cm else np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def _conv2d_vjp(vals, out, g, attrs, ctx, need):
    x, w = vals
    cm = attrs.get("layout", "bchw") == "cbhw"
    s, p = attrs["stride"], attrs["padding"]
    F, C, kh, kw = w.shape
    cols = ctx.get("cols")
    if cols is None:
        xt = x if cm else x.transpose(1, 0, 2, 3)
        cols = _k.im2col(np.ascontiguousarray(xt), kh, kw, s, p)
    B, Ho, Wo = cols.shape[3:]
    gt = (g if cm else np.ascontiguousarray(g.transpose(1, 0, 2, 3))).reshape(F, -1)
    gw = (gt @ cols.reshape(-1, B * Ho * Wo).T).reshape(w.shape) if need[1] else None
    if not need[0]:
        return None, gw
    gcols = (w.reshape(F, -1).T @ gt).reshape(C, kh, kw, B, Ho, Wo)
    gxt = _k.col2im(gcols, x.shape[2], x.shape[3], s, p)
    gx = gxt if cm else np.ascontiguousarray(gxt.transpose(1, 0, 2, 3))
    return gx, gw


def _maxpool_fwd(vals, attrs, ctx):
    x = vals[0]
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool2d needs even spatial dims, got {x.shape}")
    out, ctx["idx"] = _k.maxpool_fwd(np.ascontiguousarray(x))
    return out


def _maxpool_vjp(vals, out, g, attrs, ctx, need):
    idx = ctx.get("idx")
    if idx is None:
        _, idx = _k.maxpool_fwd(np.ascontiguousarray(vals[0]))
    return (_k.maxpool_bwd(np.ascontiguousarray(g), idx),)


def _swap01_fwd(vals, attrs, ctx):
    return np.ascontiguousarray(np.swapaxes(vals[0], 0, 1))


def _swap01_vjp(vals, out, g, attrs, ctx, need):
    return (np.ascontiguousarray(np.swapaxes(g, 0, 1)),)


def _flatten_fwd(vals, attrs, ctx):
    x = vals[0]
    if attrs.get("layout", "bchw") == "cbhw":
        x = np.swapaxes(x, 0, 1)
    return x.reshape(x.shape[0], -1)


def _flatten_vjp(vals, out, g, attrs, ctx, need):
    x = vals[0]
    if attrs.get("layout", "bchw") == "cbhw":
        shp = (x.shape[1], x.shape[0]) + x.shape[2:]
        return (np.ascontiguousarray(np.swapaxes(g.reshape(shp), 0, 1)),)
    return (g.reshape(x.shape),)


def _sum_fwd(vals, attrs, ctx):
    return np.asarray(vals[0].sum())


def _sum_vjp(vals, out, g, attrs, ctx, need):
    return (np.broadcast_to(g, vals[0].shape).copy(),)


def _targets(logits, labels):
    if labels.ndim == 1:
        k = logits.shape[1]
        lab = labels.astype(np.int64)
        if lab.shape[0] != logits.shape[0]:
            raise ShapeError(f"softmax_xent: {lab.shape[0]} labels for {logits.shape[0]} rows")
        if lab.min(initial=0) < 0 or lab.max(initial=0) >= k:
            raise ValueError(f"label out of range for {k} classes")
        t = np.zeros_like(logits)
        t[np.arange(lab.shape[0]), lab] = 1.0
        return t
    if labels.shape != logits.shape:
        raise ShapeError(f"softmax_xent: targets {labels.shape} vs logits {logits.shape}")
    return labels


def log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _xent_fwd(vals, attrs, ctx):
    z, labels = vals
    if z.ndim != 2:
        raise ShapeError(f"softmax_xent expects (B, K) logits, got {z.shape}")
    t = _targets(z, labels)
    ctx["t"] = t
    return np.asarray(-(t * log_softmax(z)).sum() / z.shape[0])


def _xent_vjp(vals, out, g, attrs, ctx, need):
    z, labels = vals
    t = ctx["t"] if "t" in ctx else _targets(z, labels)
    p = np.exp(log_softmax(z))
    return g * (p - t) / z.shape[0], None


OPS: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_matmul_fwd, _matmul_vjp),
    "add": (_add_fwd, _add_vjp),
    "mul": (_mul_fwd, _mul_vjp),
    "scale": (_scale_fwd, _scale_vjp),
    "relu": (_relu_fwd, _relu_vjp),
    "conv2d": (_conv2d_fwd, _conv2d_vjp),
    "maxpool2d": (_maxpool_fwd, _maxpool_vjp),
    "swap01": (_swap01_fwd, _swap01_vjp),
    "flatten": (_flatten_fwd, _flatten_vjp),
    "sum": (_sum_fwd, _sum_vjp),
    "softmax_xent": (_xent_fwd, _xent_vjp),
}


def _check_finite(arr, what):
    # a finite sum implies every element is finite
    if not np.isfinite(np.sum(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


class Values(list):
    """Per-node forward results, plus the kernels' scratch space."""

    def __init__(self, n):
        super().__init__([None] * n)
        self.ctx = [dict() for _ in range(n)]


def forward(graph: Graph, bindings: dict) -> Values:
    """Evaluate every node. ``bindings`` maps leaf ids (or leaf names) to arrays."""
    by_name = {n.name: i for i, n in enumerate(graph.nodes) if n.name is not None}
    bound = {}
    for k, v in bindings.items():
        i = by_name[k] if isinstance(k, str) else k
        bound[i] = v
    values = Values(len(graph.nodes))
    for i, node in enumerate(graph.nodes):
        if node.op in LEAF_KINDS:
            if i not in bound:
                raise GraphError(f"unbound leaf {node.name or i} ({node.op})")
            v = bound[i]
            if node.op != "const" or np.asarray(v).dtype.kind == "f":
                v = np.asarray(v, dtype=np.float64)
            values[i] = v
            continue
        fwd, _ = OPS[node.op]
        out = fwd([values[j] for j in node.inputs], node.attrs, values.ctx[i])
        _check_finite(out, f"{node.op} output (node {i})")
        values[i] = out
    return values


def backward(graph: Graph, values: list, wrt=None) -> dict[int, np.ndarray]:
    """Gradients of the loss node w.r.t. param and input leaves.

    ``wrt`` restricts the leaves (default: every param and input); branches
    that reach none of them are skipped.
    """
    if graph.loss is None:
        raise GraphError("graph has no loss node")
    loss = values[graph.loss]
    if loss is None:
        raise GraphError("forward has not been run")
    if np.ndim(loss) != 0:
        raise ShapeError(f"loss must be scalar, got shape {np.shape(loss)}")
    targets = [i for i, n in enumerate(graph.nodes) if n.op in ("param", "input")]
    if wrt is not None:
        wrt = set(wrt)
        targets = [i for i in targets if i in wrt]
    live = [False] * len(graph.nodes)
    for i in targets:
        live[i] = True
    for i, node in enumerate(graph.nodes):
        if node.op not in LEAF_KINDS:
            live[i] = any(live[j] for j in node.inputs)
    ctxs = getattr(values, "ctx", None) or [dict() for _ in graph.nodes]
    grads: list = [None] * len(graph.nodes)
    grads[graph.loss] = np.asarray(1.0)
    for i in range(graph.loss, -1, -1):
        node = graph.nodes[i]
        g = grads[i]
        if g is None or node.op in LEAF_KINDS or not live[i]:
            continue
        _, vjp = OPS[node.op]
        need = tuple(live[j] for j in node.inputs)
        parts = vjp([values[j] for j in node.inputs], values[i], g, node.attrs, ctxs[i], need)
        for j, gj in zip(node.inputs, parts):
            if gj is None or not live[j]:
                continue
            grads[j] = gj if grads[j] is None else grads[j] + gj
    out = {}
    for i in targets:
        g = grads[i] if grads[i] is not None else np.zeros_like(values[i])
        _check_finite(g, f"gradient of {graph.nodes[i].name or i}")
        out[i] = g
    return out


def grad_check(graph: Graph, bindings: dict, step: float = 1e-5,
               max_coords: int | None = None, rng=None, floor: float = 1e-6) -> float:
    """Max relative error between ``backward`` and central differences.

    Error per coordinate is |a - c| / max(|a| + |c|, floor). The floor keeps
    gradients that are zero up to roundoff (about eps_mach / step) from
    reporting noise as a large relative error. With ``max_coords`` a random
    subset of coordinates per leaf is probed.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    vals = forward(graph, bindings)
    analytic = backward(graph, vals)
    by_name = {n.name: i for i, n in enumerate(graph.nodes) if n.name is not None}
    base = {(by_name[k] if isinstance(k, str) else k): np.array(v) for k, v in bindings.items()}
    rng = np.random.default_rng(0) if rng is None else rng

    def f(b):
        v = forward(graph, b)[graph.loss]
        if not np.isfinite(v):
            raise NonFiniteError("non-finite loss at perturbed point")
        return float(v)

    worst = 0.0
    for leaf, a in analytic.items():
        x = base[leaf].astype(np.float64)
        flat = x.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            fp = f({**base, leaf: x})
            flat[c] = orig - step
            fm = f({**base, leaf: x})
            flat[c] = orig
            num = (fp - fm) / (2 * step)
            an = a.reshape(-1)[c]
            worst = max(worst, abs(an - num) / max(abs(an) + abs(num), floor))
    return worst
