"""Small reverse-mode autodiff over dense numpy arrays.

A :class:`Graph` is an append-only tape. Leaves are created with
:meth:`Graph.param` (differentiable) or :meth:`Graph.const`; every other node
is produced by :meth:`Graph.apply` with one of the kinds in :data:`OPS`.
Node handles are plain integers. A graph is used for exactly one backward pass.

Subgradient convention: relu, hinge_pos, abs and clamp all have derivative 0
at their kinks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels

PRECISIONS = {"f32": np.float32, "f64": np.float64}


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


@dataclass
class _Node:
    kind: str
    inputs: tuple
    value: np.ndarray
    attrs: dict = field(default_factory=dict)
    requires_grad: bool = False
    is_param: bool = False
    name: str | None = None


def _shape_fail(kind, *shapes, why=""):
    msg = f"{kind}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}"
    if why:
        msg += f" ({why})"
    raise ShapeError(msg)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (leading batch dims or a trailing row vector)."""
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --- forward / backward rules --------------------------------------------
# each rule: fwd(vals, attrs) -> out ; bwd(g, vals, out, attrs) -> tuple of input grads

def _matmul_fwd(v, a):
    x, w = v
    if x.ndim < 2 or w.ndim < 2 or x.shape[-1] != w.shape[-2]:
        _shape_fail("matmul", x.shape, w.shape)
    if x.ndim > 2 and w.ndim > 2 and x.shape[:-2] != w.shape[:-2]:
        _shape_fail("matmul", x.shape, w.shape, "batch dims differ")
    return np.matmul(x, w)


def _matmul_bwd(g, v, out, a):
    x, w = v
    gx = np.matmul(g, np.swapaxes(w, -1, -2))
    if w.ndim == 2 and x.ndim == 3:
        # (B,p,q) @ (q,r): one GEMM over the flattened batch
        gw = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    else:
        gw = np.matmul(np.swapaxes(x, -1, -2), g)
    return _unbroadcast(gx, x.shape), _unbroadcast(gw, w.shape)


def _add_fwd(v, a):
    x, b = v
    if x.shape == b.shape or b.ndim == 0 or (b.ndim == 1 and x.ndim >= 1 and x.shape[-1] == b.shape[0]):
        return x + b
    _shape_fail("add", x.shape, b.shape, "only equal shapes, scalar or row-vector bias")


def _add_bwd(g, v, out, a):
    x, b = v
    return g, _unbroadcast(g, b.shape)


def _mul_fwd(v, a):
    x, b = v
    if x.shape != b.shape:
        _shape_fail("elemwise_mul", x.shape, b.shape)
    return x * b


def _mul_bwd(g, v, out, a):
    return g * v[1], g * v[0]


def _relu_fwd(v, a):
    return np.maximum(v[0], 0)


def _relu_bwd(g, v, out, a):
    return (g * (v[0] > 0),)


def _sigmoid_fwd(v, a):
    x = v[0]
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _sigmoid_bwd(g, v, out, a):
    return (g * out * (1 - out),)


def _exp_bwd(g, v, out, a):
    return (g * out,)


def _log_bwd(g, v, out, a):
    return (g / v[0],)


def _abs_bwd(g, v, out, a):
    return (g * np.sign(v[0]),)


def _lse_fwd(v, a):
    x = v[0]
    if x.ndim < 1:
        _shape_fail("logsumexp_rows", x.shape)
    m = x.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True)))[..., 0]


def _lse_bwd(g, v, out, a):
    return (g[..., None] * np.exp(v[0] - out[..., None]),)


def _sum_fwd(v, a):
    return np.asarray(v[0].sum(axis=a.get("axis")))


def _sum_bwd(g, v, out, a):
    axis = a.get("axis")
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, v[0].shape).copy(),)


def _mean_fwd(v, a):
    return np.asarray(v[0].mean())


def _mean_bwd(g, v, out, a):
    return (np.full_like(v[0], g / v[0].size),)


def _scale_fwd(v, a):
    return v[0] * v[0].dtype.type(a["c"])


def _scale_bwd(g, v, out, a):
    return (g * g.dtype.type(a["c"]),)


def _clamp_fwd(v, a):
    return np.clip(v[0], a["lo"], a["hi"])


def _clamp_bwd(g, v, out, a):
    x = v[0]
    return (g * ((x > a["lo"]) & (x < a["hi"])),)


def _transpose_fwd(v, a):
    if v[0].ndim < 2:
        _shape_fail("transpose", v[0].shape)
    return np.swapaxes(v[0], -1, -2)


def _transpose_bwd(g, v, out, a):
    return (np.swapaxes(g, -1, -2),)


def _reshape_fwd(v, a):
    try:
        return v[0].reshape(a["shape"])
    except ValueError:
        _shape_fail("reshape", v[0].shape, a["shape"])


def _reshape_bwd(g, v, out, a):
    return (g.reshape(v[0].shape),)


def _label_margin_fwd(v, a):
    z, y = v[0], a["labels"]
    if z.ndim != 2 or y.shape != (z.shape[0],):
        _shape_fail("label_margin", z.shape, y.shape)
    return z - z[np.arange(z.shape[0]), y][:, None]


def _label_margin_bwd(g, v, out, a):
    y = a["labels"]
    gz = g.copy()
    gz[np.arange(g.shape[0]), y] -= g.sum(axis=1)
    return (gz,)


def _mask_cols_fwd(v, a):
    x, m = v[0], a["mask"]
    if m.ndim != 2 or x.shape[-1] != m.shape[1] or (x.ndim == 3 and x.shape[0] != m.shape[0]):
        _shape_fail("mask_cols", x.shape, m.shape)
    return x * m[:, None, :]


def _mask_cols_bwd(g, v, out, a):
    gx = g * a["mask"][:, None, :]
    if v[0].ndim == 2:
        gx = gx.sum(axis=0)
    return (gx,)


def _robust_l1_fwd(v, a):
    J, y = v[0], a["labels"]
    if J.ndim != 3 or y.shape != (J.shape[0],):
        _shape_fail("robust_l1", J.shape, y.shape)
    return kernels.robust_l1(np.ascontiguousarray(J), y)


def _robust_l1_bwd(g, v, out, a):
    return (kernels.robust_l1_grad(np.ascontiguousarray(v[0]), a["labels"], np.ascontiguousarray(g)),)


OPS: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_matmul_fwd, _matmul_bwd),
    "add": (_add_fwd, _add_bwd),
    "elemwise_mul": (_mul_fwd, _mul_bwd),
    "relu": (_relu_fwd, _relu_bwd),
    "hinge_pos": (_relu_fwd, _relu_bwd),
    "sigmoid": (_sigmoid_fwd, _sigmoid_bwd),
    "exp": (lambda v, a: np.exp(v[0]), _exp_bwd),
    "log": (lambda v, a: np.log(v[0]), _log_bwd),
    "abs": (lambda v, a: np.abs(v[0]), _abs_bwd),
    "logsumexp_rows": (_lse_fwd, _lse_bwd),
    "sum": (_sum_fwd, _sum_bwd),
    "mean": (_mean_fwd, _mean_bwd),
    "scale": (_scale_fwd, _scale_bwd),
    "clamp": (_clamp_fwd, _clamp_bwd),
    "transpose": (_transpose_fwd, _transpose_bwd),
    "reshape": (_reshape_fwd, _reshape_bwd),
    "label_margin": (_label_margin_fwd, _label_margin_bwd),
    "mask_cols": (_mask_cols_fwd, _mask_cols_bwd),
    "robust_l1": (_robust_l1_fwd, _robust_l1_bwd),
}

_ARITY = {"matmul": 2, "add": 2, "elemwise_mul": 2}


class Graph:
    """Append-only tape of operations in a fixed precision."""

    def __init__(self, precision: str = "f64"):
        if precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}, got {precision!r}")
        self.precision = precision
        self.dtype = PRECISIONS[precision]
        self.nodes: list[_Node] = []
        self.consumed = False

    def __len__(self):
        return len(self.nodes)

    def _push(self, node: _Node) -> int:
        if self.consumed:
            raise GraphError("graph already used for backward; build a new one")
        self.nodes.append(node)
        return len(self.nodes) - 1

    def param(self, value, name: str | None = None) -> int:
        arr = np.array(value, dtype=self.dtype)
        return self._push(_Node("param", (), arr, requires_grad=True, is_param=True, name=name))

    def const(self, value) -> int:
        return self._push(_Node("const", (), np.asarray(value, dtype=self.dtype)))

    def value(self, nid: int) -> np.ndarray:
        return self.nodes[nid].value

    def apply(self, kind: str, *inputs: int, **attrs) -> int:
        if kind not in OPS:
            raise ValueError(f"unknown op kind {kind!r}")
        want = _ARITY.get(kind, 1)
        if len(inputs) != want:
            raise ValueError(f"{kind} takes {want} input(s), got {len(inputs)}")
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise GraphError(f"{kind}: unknown input node {i}")
        if "labels" in attrs:
            attrs["labels"] = np.ascontiguousarray(attrs["labels"], dtype=np.int64)
        if "mask" in attrs:
            attrs["mask"] = np.asarray(attrs["mask"], dtype=self.dtype)
        vals = [self.nodes[i].value for i in inputs]
        out = OPS[kind][0](vals, attrs)
        out = np.asarray(out, dtype=self.dtype)
        rg = any(self.nodes[i].requires_grad for i in inputs)
        return self._push(_Node(kind, tuple(inputs), out, attrs, requires_grad=rg))

    # thin conveniences ---------------------------------------------------
    def matmul(self, a, b): return self.apply("matmul", a, b)
    def add(self, a, b): return self.apply("add", a, b)
    def mul(self, a, b): return self.apply("elemwise_mul", a, b)
    def scale(self, a, c): return self.apply("scale", a, c=float(c))
    def sub(self, a, b): return self.add(a, self.scale(b, -1.0))
    def relu(self, a): return self.apply("relu", a)
    def sigmoid(self, a): return self.apply("sigmoid", a)
    def sum(self, a, axis=None): return self.apply("sum", a, axis=axis)
    def mean(self, a): return self.apply("mean", a)
    def transpose(self, a): return self.apply("transpose", a)

    def tile(self, a, batch: int) -> int:
        """Repeat ``a`` along a new leading axis of length ``batch`` (gradient sums back)."""
        shape = self.value(a).shape
        flat = self.apply("reshape", a, shape=(1, int(np.prod(shape))))
        rep = self.matmul(self.const(np.ones((batch, 1))), flat)
        return self.apply("reshape", rep, shape=(batch, *shape))


def forward_op(graph: Graph, kind: str, inputs, **attrs) -> int:
    return graph.apply(kind, *inputs, **attrs)


def backward(graph: Graph, root: int, wrt=None) -> dict[int, np.ndarray]:
    """Gradient of the scalar ``root`` w.r.t. every parameter leaf (or ``wrt``)."""
    if graph.consumed:
        raise GraphError("graph already used for backward")
    rv = graph.nodes[root].value
    if rv.size != 1 or rv.ndim > 1:
        raise ShapeError(f"backward: root must be scalar, got shape {rv.shape}")
    graph.consumed = True
    grads: dict[int, np.ndarray] = {root: np.ones_like(rv)}
    for nid in range(root, -1, -1):
        g = grads.get(nid)
        node = graph.nodes[nid]
        if g is None or not node.inputs:
            continue
        vals = [graph.nodes[i].value for i in node.inputs]
        in_grads = OPS[node.kind][1](g, vals, node.value, node.attrs)
        for i, gi in zip(node.inputs, in_grads):
            if not graph.nodes[i].requires_grad:
                continue
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = np.asarray(gi, dtype=graph.dtype)
        if nid != root and (wrt is None or nid not in wrt):
            del grads[nid]
    targets = wrt if wrt is not None else [i for i, n in enumerate(graph.nodes[: root + 1]) if n.is_param]
    return {i: grads.get(i, np.zeros_like(graph.nodes[i].value)) for i in targets}
