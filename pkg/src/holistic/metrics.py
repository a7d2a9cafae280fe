"""Reported quantities: accuracy, adversarial accuracy, sparsity, stability."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .attacks import AttackConfig, pgd
from .gates import GateConfig, test_mask
from .network import Classifier, MLPParams


@dataclass
class MetricBundle:
    natural_acc: float
    adv_acc: dict = field(default_factory=dict)  # radius -> accuracy
    sparsity: float = 0.0
    stability_score: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adv_acc"] = {_rho_key(r): v for r, v in sorted(self.adv_acc.items())}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricBundle":
        return cls(d["natural_acc"], {float(k): v for k, v in d.get("adv_acc", {}).items()},
                   d.get("sparsity", 0.0), d.get("stability_score"))


def _rho_key(r: float) -> str:
    return f"{float(r):.0e}"


def natural_accuracy(model: Classifier, X, y) -> float:
    return float(np.mean(model.predict(X) == np.asarray(y))) if len(y) else 0.0


def stability_score(predictions, n_classes: int) -> float:
    """(1/n) sum_i sum_k p_ik (1 - p_ik) over s models' predicted classes (rows)."""
    P = np.asarray(predictions)
    if P.ndim != 2 or P.shape[0] < 2:
        raise ValueError(f"need an (s, n) prediction matrix with s >= 2, got shape {P.shape}")
    if P.min() < 0 or P.max() >= n_classes:
        raise ValueError(f"predictions must lie in [0, {n_classes})")
    s, n = P.shape
    counts = np.zeros((n, n_classes))
    np.add.at(counts, (np.tile(np.arange(n), s), P.ravel()), 1.0)
    p = counts / s
    return float((p * (1.0 - p)).sum(axis=1).mean())


def sparsity_fraction(params: MLPParams, gate_cfg: GateConfig | None = None) -> float:
    """Share of weights that are exactly zero at evaluation time."""
    if params.gated:
        cfg = gate_cfg or GateConfig()
        zeros = sum(int((test_mask(la, cfg) == 0).sum()) for la in params.log_alpha)
    else:
        zeros = sum(int((W == 0).sum()) for W in params.weights)
    return zeros / params.n_weights


def improvement_captured(nominal_acc: float, hdl_acc: float) -> float:
    if nominal_acc >= 1.0:
        raise ValueError("improvement captured is undefined when the nominal accuracy is 1")
    return (hdl_acc - nominal_acc) / (1.0 - nominal_acc)


def adversarial_accuracy(model: Classifier, X, y, cfg: AttackConfig) -> float:
    if cfg.radius == 0:
        return natural_accuracy(model, X, y)
    _, fooled = pgd(model, X, y, cfg, return_fooled=True)
    return float(np.mean(~fooled)) if len(y) else 0.0


def adversarial_accuracy_curve(model: Classifier, X, y, radii, **attack_kw) -> dict:
    """Adversarial accuracy at each radius.

    A point fooled inside a smaller ball counts as fooled at every larger
    radius, so the curve never increases with the radius.
    """
    out, fooled = {}, np.zeros(len(y), dtype=bool)
    for r in sorted(float(r) for r in radii):
        if r > 0:
            _, f = pgd(model, X, y, AttackConfig(radius=r, **attack_kw), return_fooled=True)
        else:
            f = model.predict(X) != np.asarray(y)
        fooled |= f
        out[r] = float(np.mean(~fooled)) if len(y) else 0.0
    return out


def evaluate(params: MLPParams, X, y, radii=(), gate_cfg: GateConfig | None = None, precision: str = "f64",
             **attack_kw) -> tuple[MetricBundle, np.ndarray]:
    """Metric bundle on (X, y) plus the model's predictions there."""
    model = Classifier.from_params(params, gate_cfg, precision)
    pred = model.predict(X)
    bundle = MetricBundle(
        natural_acc=float(np.mean(pred == y)) if len(y) else 0.0,
        adv_acc=adversarial_accuracy_curve(model, X, y, radii, **attack_kw) if len(radii) else {},
        sparsity=sparsity_fraction(params, gate_cfg),
    )
    return bundle, pred
