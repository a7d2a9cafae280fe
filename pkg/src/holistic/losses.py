"""Training objectives: cross-entropy, its linearized robust upper bound, the
subset-robust (CVaR) wrapper, the L0 gate penalty, and their eight combinations.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .diffcore import Graph
from .gates import GateConfig, l0_penalty, sample_gates
from .network import Bound, forward, input_jacobian

# name -> (robust, sparse, stable)
VARIANTS = {
    "nominal": (False, False, False),
    "robust": (True, False, False),
    "stable": (False, False, True),
    "sparse": (False, True, False),
    "robust_sparse": (True, True, False),
    "stable_sparse": (False, True, True),
    "robust_stable": (True, False, True),
    "hdl": (True, True, True),
}

DISPLAY_NAMES = {
    "nominal": "DL",
    "robust": "Robust",
    "stable": "Stable",
    "sparse": "Sparse",
    "robust_sparse": "Robust+Sparse",
    "stable_sparse": "Stable+Sparse",
    "robust_stable": "Stable+Robust",
    "hdl": "HDL",
}


@dataclass(frozen=True)
class LossSpec:
    robust: bool = False
    rho: float = 0.0
    sparse: bool = False
    lam: float = 0.0
    gate: GateConfig = field(default_factory=GateConfig)
    stable: bool = False
    a_fraction: float = 0.7
    weight_decay: float = 0.0
    per_example_gates: bool = False

    def __post_init__(self):
        if self.rho < 0 or self.lam < 0 or self.weight_decay < 0:
            raise ValueError("rho, lam and weight_decay must be >= 0")
        if not 0 < self.a_fraction <= 1:
            raise ValueError(f"a_fraction must be in (0, 1], got {self.a_fraction}")

    @classmethod
    def variant(cls, name: str, **kw) -> "LossSpec":
        try:
            robust, sparse, stable = VARIANTS[name]
        except KeyError:
            raise ValueError(f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}") from None
        return cls(robust=robust, sparse=sparse, stable=stable, **kw)

    @property
    def name(self) -> str:
        flags = (self.robust, self.sparse, self.stable)
        return next(k for k, v in VARIANTS.items() if v == flags)

    def resolved(self) -> dict:
        """Only the settings this variant actually uses."""
        out = {"variant": self.name, "weight_decay": self.weight_decay}
        if self.robust:
            out["rho"] = self.rho
        if self.sparse:
            out["lam"] = self.lam
            out["gate"] = asdict(self.gate)
            if self.per_example_gates:
                out["per_example_gates"] = True
        if self.stable:
            out["a_fraction"] = self.a_fraction
        return out


@dataclass
class StabilityState:
    theta: float = 0.0


def _check_labels(labels, K):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels must lie in [0, {K}), got range [{labels.min()}, {labels.max()}]")
    return labels


def cross_entropy(graph: Graph, logits: int, labels) -> int:
    """Per-example logsumexp_k (z_k - z_y)."""
    labels = _check_labels(labels, graph.value(logits).shape[1])
    return graph.apply("logsumexp_rows", graph.apply("label_margin", logits, labels=labels))


def robust_cross_entropy(graph: Graph, logits: int, jacobian: int, labels, rho: float) -> int:
    """Per-example logsumexp_k (z_k - z_y + rho * ||J_k - J_y||_1)."""
    if rho < 0:
        raise ValueError(f"rho must be >= 0, got {rho}")
    labels = _check_labels(labels, graph.value(logits).shape[1])
    jv = graph.value(jacobian)
    if jv.ndim != 3 or jv.shape[:2] != graph.value(logits).shape:
        raise ValueError(f"jacobian shape {jv.shape} does not match logits {graph.value(logits).shape}")
    margins = graph.apply("label_margin", logits, labels=labels)
    if rho == 0:
        return graph.apply("logsumexp_rows", margins)
    pen = graph.scale(graph.apply("robust_l1", jacobian, labels=labels), rho)
    return graph.apply("logsumexp_rows", graph.add(margins, pen))


def subset_size(a_fraction: float, batch: int) -> int:
    return max(1, int(round(a_fraction * batch)))


def cvar_wrap(graph: Graph, losses: int, theta: int, a: int) -> int:
    """theta + (1/a) * sum_n [loss_n - theta]^+ ; its minimum over theta is the mean of the a largest losses."""
    B = graph.value(losses).size
    if not 1 <= a <= B:
        raise ValueError(f"subset size a must be in [1, {B}], got {a}")
    excess = graph.apply("hinge_pos", graph.sub(losses, theta))
    return graph.add(graph.scale(graph.sum(excess), 1.0 / a), theta)


def top_a_mean(losses, a: int) -> float:
    """Closed-form minimum of the CVaR wrapper over theta."""
    losses = np.sort(np.asarray(losses, dtype=np.float64))[::-1]
    if not 1 <= a <= losses.size:
        raise ValueError(f"subset size a must be in [1, {losses.size}], got {a}")
    return float(losses[:a].mean())


def compose(spec: LossSpec, graph: Graph, x, y, bound: Bound, theta: int | None = None,
            rng: np.random.Generator | None = None, dropout_rate: float = 0.0, mode: str = "train") -> int:
    """Scalar training objective for one batch (weight decay excluded; the optimizer applies it)."""
    masks = None
    if spec.sparse:
        if bound.log_alpha is None:
            raise ValueError(f"variant {spec.name!r} needs gate parameters but the model has none")
        if rng is None:
            raise ValueError("sampling gates needs rng")
        B = np.shape(x)[0] if not isinstance(x, (int, np.integer)) else graph.value(x).shape[0]
        masks = [sample_gates(graph, la, spec.gate, rng, batch=B if spec.per_example_gates else None)
                 for la in bound.log_alpha]
    trace = forward(graph, bound, x, masks=masks, dropout_rate=dropout_rate, mode=mode, rng=rng)
    if spec.robust and spec.rho > 0:
        per = robust_cross_entropy(graph, trace.logits, input_jacobian(graph, trace), y, spec.rho)
    else:
        per = cross_entropy(graph, trace.logits, y)
    if spec.stable:
        if theta is None:
            raise ValueError(f"variant {spec.name!r} needs the stability variable theta")
        data = cvar_wrap(graph, per, theta, subset_size(spec.a_fraction, trace.batch))
    else:
        data = graph.mean(per)
    if spec.sparse and spec.lam > 0:
        return graph.add(data, graph.scale(l0_penalty(graph, bound.log_alpha, spec.gate), spec.lam))
    return data
