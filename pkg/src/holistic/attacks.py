"""l_inf evasion attacks used for adversarial-accuracy evaluation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _rng, kernels
from .network import Classifier


@dataclass(frozen=True)
class AttackConfig:
    radius: float
    steps: int = 40
    step_size: float | None = None  # default 2.5 * radius / steps
    restarts: int = 1
    seed: int = 0
    random_start: bool = True
    clip: tuple | None = None  # optional (lo, hi) data box, e.g. (0, 1) for pixels

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError(f"radius must be >= 0, got {self.radius}")
        if self.steps < 1 or self.restarts < 1:
            raise ValueError("steps and restarts must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be > 0")

    @property
    def alpha(self) -> float:
        return self.step_size if self.step_size is not None else 2.5 * self.radius / self.steps


def _project(x_adv, x, rho, clip):
    out = np.clip(x_adv, x - rho, x + rho)
    if clip is not None:
        out = np.clip(out, clip[0], clip[1])
    return out


def fgsm(model: Classifier, x, y, rho: float, clip=None) -> np.ndarray:
    """One signed-gradient step of size rho (sign(0) = 0)."""
    if rho < 0:
        raise ValueError(f"rho must be >= 0, got {rho}")
    x = np.asarray(x, dtype=model.weights[0].dtype)
    if rho == 0:
        return x.copy()
    _, g = model.loss_and_input_grad(x, y)
    return _project(x + rho * np.sign(g), x, rho, clip)


def pgd(model: Classifier, x, y, cfg: AttackConfig, return_fooled: bool = False, chunk: int = 2048):
    """Projected signed-gradient ascent on the cross-entropy with random restarts.

    Returns the highest-loss point seen (the clean input is a candidate). With
    ``return_fooled`` also returns, per example, whether any evaluated point
    was misclassified.
    """
    x = np.asarray(x, dtype=model.weights[0].dtype)
    y = np.asarray(y, dtype=np.int64)
    best = np.empty_like(x)
    fooled = np.zeros(len(x), dtype=bool)
    for s in range(0, len(x), chunk):
        best[s:s + chunk], fooled[s:s + chunk] = _pgd_chunk(model, x[s:s + chunk], y[s:s + chunk], cfg, s)
    return (best, fooled) if return_fooled else best


def _pgd_chunk(model, x, y, cfg, offset):
    rho = cfg.radius
    loss, grad = model.loss_and_input_grad(x, y)
    best, best_loss = x.copy(), loss
    fooled = model.predict(x) != y
    if rho == 0:
        return best, fooled
    for r in range(cfg.restarts):
        rng = _rng.stream(cfg.seed, "attack", r, offset)
        if cfg.random_start:
            xa = _project(x + rng.uniform(-rho, rho, size=x.shape).astype(x.dtype), x, rho, cfg.clip)
            loss, grad = model.loss_and_input_grad(xa, y)
            best, best_loss, fooled = _keep(model, xa, y, loss, best, best_loss, fooled)
        else:
            xa = x.copy()
        for _ in range(cfg.steps):
            xa = _project(xa + cfg.alpha * np.sign(grad), x, rho, cfg.clip)
            loss, grad = model.loss_and_input_grad(xa, y)
            best, best_loss, fooled = _keep(model, xa, y, loss, best, best_loss, fooled)
    return best, fooled


def _keep(model, xa, y, loss, best, best_loss, fooled):
    better = loss > best_loss
    best = np.where(better[:, None], xa, best)
    fooled = fooled | (model.predict(xa) != y)
    return best, np.maximum(loss, best_loss), fooled


def corner_oracle(g, rho: float, max_dim: int = 20):
    """Exhaustive max of delta . g over the 2^M corners of the radius-rho box."""
    g = np.asarray(g, dtype=np.float64).ravel()
    if g.size > max_dim:
        raise ValueError(f"corner_oracle enumerates 2^M corners; M={g.size} exceeds {max_dim}")
    if rho < 0:
        raise ValueError(f"rho must be >= 0, got {rho}")
    return kernels.corner_max(g, float(rho))
