"""Feed-forward ReLU classifier with optional per-weight gates.

Weights are stored as ``(fan_out, fan_in)`` so that layer ``l`` computes
``z = W @ h + b``; batches are rows, i.e. ``Z = H @ W.T + b``.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _rng
from .diffcore import PRECISIONS, Graph, backward
from .gates import GateConfig, init_log_alpha, test_mask

CHECKPOINT_FORMAT = "holistic-mlp"
CHECKPOINT_VERSION = 1


@dataclass
class MLPParams:
    weights: list
    biases: list
    log_alpha: list | None = None

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ValueError(f"layer {i}: weight {W.shape} and bias {b.shape} do not match")
            if i and W.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i}: fan_in {W.shape[1]} != previous fan_out {self.weights[i - 1].shape[0]}")
        if self.log_alpha is not None:
            if [la.shape for la in self.log_alpha] != [W.shape for W in self.weights]:
                raise ValueError("log_alpha shapes must match weight shapes")
        for k, v in self.arrays().items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{k} has non-finite entries")

    @property
    def layer_sizes(self) -> tuple:
        return (self.weights[0].shape[1], *(W.shape[0] for W in self.weights))

    @property
    def gated(self) -> bool:
        return self.log_alpha is not None

    @property
    def n_weights(self) -> int:
        return sum(W.size for W in self.weights)

    def astype(self, dtype) -> "MLPParams":
        cast = lambda xs: [np.array(x, dtype=dtype) for x in xs]
        return MLPParams(cast(self.weights), cast(self.biases), None if self.log_alpha is None else cast(self.log_alpha))

    def copy(self) -> "MLPParams":
        return self.astype(self.weights[0].dtype)

    def arrays(self) -> dict:
        out = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"], out[f"b{i}"] = W, b
            if self.log_alpha is not None:
                out[f"log_alpha{i}"] = self.log_alpha[i]
        return out

    @classmethod
    def from_arrays(cls, arrays: dict, n_layers: int) -> "MLPParams":
        W = [arrays[f"W{i}"] for i in range(n_layers)]
        b = [arrays[f"b{i}"] for i in range(n_layers)]
        la = [arrays[f"log_alpha{i}"] for i in range(n_layers)] if "log_alpha0" in arrays else None
        return cls(W, b, la)


def glorot_init(layer_sizes, seed: int, gated: bool = False, dtype=np.float64) -> MLPParams:
    """Glorot-uniform weights, zero biases; gates (if any) start near fully open."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or any(s <= 0 for s in sizes):
        raise ValueError(f"layer_sizes needs >= 2 positive entries, got {layer_sizes!r}")
    rng = _rng.stream(seed, "init")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    log_alpha = None
    if gated:
        grng = _rng.stream(seed, "gates_init")
        log_alpha = [init_log_alpha(W.shape, grng).astype(dtype) for W in weights]
    return MLPParams(weights, biases, log_alpha)


# --- graph construction ---------------------------------------------------

@dataclass
class Bound:
    """Parameter node ids of an :class:`MLPParams` placed on a graph."""

    weights: list
    biases: list
    log_alpha: list | None = None

    def all_nodes(self) -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"], out[f"b{i}"] = w, b
            if self.log_alpha is not None:
                out[f"log_alpha{i}"] = self.log_alpha[i]
        return out


def bind(graph: Graph, params: MLPParams, trainable: bool = True) -> Bound:
    leaf = graph.param if trainable else (lambda v, name=None: graph.const(v))
    W = [leaf(w, name=f"W{i}") for i, w in enumerate(params.weights)]
    b = [leaf(v, name=f"b{i}") for i, v in enumerate(params.biases)]
    la = None
    if params.log_alpha is not None:
        la = [leaf(v, name=f"log_alpha{i}") for i, v in enumerate(params.log_alpha)]
    return Bound(W, b, la)


@dataclass
class ForwardTrace:
    logits: int
    patterns: list  # bool (B, r_l) per hidden layer: 1{z_l > 0}
    dropout_masks: list  # scaled keep-masks per hidden layer, or None
    weights: list  # effective weight nodes actually used
    batch: int
    input_dim: int

    def slope_masks(self) -> list:
        """d h_l / d z_l per example: activation pattern times any dropout scaling."""
        out = []
        for p, d in zip(self.patterns, self.dropout_masks):
            out.append(p.astype(float) if d is None else p * d)
        return out


def forward(graph: Graph, bound: Bound, x, masks=None, dropout_rate: float = 0.0, mode: str = "eval",
            rng: np.random.Generator | None = None) -> ForwardTrace:
    """Logits of the batch ``x`` (array or node id).

    ``masks`` are gate nodes, one per weight matrix, shaped like the weight or
    with a leading batch axis for per-example gates.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError(f"dropout_rate must be in [0, 1), got {dropout_rate}")
    h = x if isinstance(x, (int, np.integer)) else graph.const(x)
    xv = graph.value(h)
    n_layers = len(bound.weights)
    first = graph.value(bound.weights[0])
    if xv.ndim != 2 or xv.shape[1] != first.shape[1]:
        raise ValueError(f"forward: input shape {xv.shape} does not match fan_in {first.shape[1]}")
    if masks is not None and len(masks) != n_layers:
        raise ValueError(f"forward: got {len(masks)} masks for {n_layers} layers")
    B = xv.shape[0]
    patterns, drops, used = [], [], []
    for i, (w, b) in enumerate(zip(bound.weights, bound.biases)):
        if masks is not None:
            mv, wv = graph.value(masks[i]), graph.value(w)
            if mv.shape != wv.shape and mv.shape != (B, *wv.shape):
                raise ValueError(f"forward: mask {mv.shape} does not match weight {wv.shape} in layer {i}")
            if mv.ndim == 3:
                w = graph.mul(graph.tile(w, B), masks[i])
            else:
                w = graph.mul(w, masks[i])
        used.append(w)
        if graph.value(w).ndim == 3:
            fan_in = graph.value(w).shape[2]
            hz = graph.apply("reshape", h, shape=(B, 1, fan_in))
            z = graph.apply("reshape", graph.matmul(hz, graph.transpose(w)), shape=(B, -1))
        else:
            z = graph.matmul(h, graph.transpose(w))
        z = graph.add(z, b)
        if i == n_layers - 1:
            return ForwardTrace(z, patterns, drops, used, B, xv.shape[1])
        patterns.append(graph.value(z) > 0)
        h = graph.relu(z)
        if mode == "train" and dropout_rate > 0:
            if rng is None:
                raise ValueError("train-mode dropout needs rng")
            keep = (rng.random(graph.value(h).shape) >= dropout_rate) / (1.0 - dropout_rate)
            drops.append(keep)
            h = graph.mul(h, graph.const(keep))
        else:
            drops.append(None)


def input_jacobian(graph: Graph, trace: ForwardTrace) -> int:
    """d logits / d x for every example as a (B, K, M) node, differentiable in the weights.

    Activation patterns are held fixed, which is what differentiating a ReLU
    network twice gives almost everywhere.
    """
    slopes = trace.slope_masks()
    if len(slopes) != len(trace.weights) - 1:
        raise ValueError("input_jacobian: trace does not match the layer count")
    A = trace.weights[-1]
    for ell in range(len(trace.weights) - 2, -1, -1):
        if slopes[ell].shape[1] != graph.value(trace.weights[ell]).shape[-2]:
            raise ValueError("input_jacobian: activation pattern does not match weights")
        A = graph.apply("mask_cols", A, mask=slopes[ell])
        A = graph.matmul(A, trace.weights[ell])
    if graph.value(A).ndim == 2:
        A = graph.apply("mask_cols", A, mask=np.ones((trace.batch, trace.input_dim)))
    return A


# --- numpy evaluation path -------------------------------------------------

def effective_weights(params: MLPParams, gate_cfg: GateConfig | None = None) -> list:
    if not params.gated:
        return list(params.weights)
    cfg = gate_cfg or GateConfig()
    return [W * test_mask(la, cfg).astype(W.dtype) for W, la in zip(params.weights, params.log_alpha)]


@dataclass(frozen=True)
class Classifier:
    """Evaluation-time network: deterministic masks folded in, no dropout."""

    weights: tuple
    biases: tuple
    precision: str = "f64"

    @classmethod
    def from_params(cls, params: MLPParams, gate_cfg: GateConfig | None = None, precision: str = "f64"):
        dtype = PRECISIONS[precision]
        W = tuple(np.asarray(w, dtype=dtype) for w in effective_weights(params, gate_cfg))
        b = tuple(np.asarray(v, dtype=dtype) for v in params.biases)
        return cls(W, b, precision)

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[0]

    def logits(self, x) -> np.ndarray:
        h = np.asarray(x, dtype=self.weights[0].dtype)
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W.T + b
            if i < len(self.weights) - 1:
                h = np.maximum(h, 0)
        return h

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)

    def loss_and_input_grad(self, x, y):
        """Per-example cross-entropy and its gradient with respect to ``x``."""
        g = Graph(self.precision)
        xn = g.param(x)
        bound = Bound([g.const(w) for w in self.weights], [g.const(b) for b in self.biases])
        tr = forward(g, bound, xn)
        per = g.apply("logsumexp_rows", g.apply("label_margin", tr.logits, labels=y))
        losses = g.value(per).copy()
        grads = backward(g, g.sum(per), wrt=[xn])
        return losses, grads[xn]


# --- checkpoint container --------------------------------------------------

def save_checkpoint(path, params: MLPParams, gate_cfg: GateConfig | None = None, precision: str = "f64",
                    meta: dict | None = None) -> Path:
    """Write a single ``.npz`` archive: a JSON ``header`` plus W{i}, b{i}, log_alpha{i} arrays."""
    path = Path(path)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "layer_sizes": list(params.layer_sizes),
        "precision": precision,
        "gated": params.gated,
        "gate": None if gate_cfg is None else {"beta": gate_cfg.beta, "gamma": gate_cfg.gamma, "zeta": gate_cfg.zeta},
        "meta": meta or {},
    }
    arrays = {k: np.asarray(v, dtype=PRECISIONS[precision]) for k, v in params.arrays().items()}
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(params, gate_cfg, header)``."""
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        arrays = {k: z[k] for k in z.files if k != "header"}
    params = MLPParams.from_arrays(arrays, len(header["layer_sizes"]) - 1)
    gate_cfg = GateConfig(**header["gate"]) if header.get("gate") else None
    return params, gate_cfg, header
