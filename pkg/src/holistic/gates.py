"""Hard-concrete gates for L0-sparse weights."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffcore import Graph

# keeps log(u / (1 - u)) finite
_U_EPS = 1e-7


@dataclass(frozen=True)
class GateConfig:
    beta: float = 2.0 / 3.0
    gamma: float = -0.1
    zeta: float = 1.1

    def __post_init__(self):
        if not (self.beta > 0 and self.gamma < 0 < 1 < self.zeta):
            raise ValueError(
                f"gate shape needs beta > 0 and gamma < 0 < 1 < zeta, got "
                f"beta={self.beta}, gamma={self.gamma}, zeta={self.zeta}"
            )

    @property
    def l0_shift(self) -> float:
        """beta * log(-gamma / zeta); the L0 term is Sigmoid(log_alpha - l0_shift)."""
        return self.beta * math.log(-self.gamma / self.zeta)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def init_log_alpha(shape, rng: np.random.Generator, mean: float = 2.0, sd: float = 0.1) -> np.ndarray:
    return rng.normal(mean, sd, size=shape)


def sample_gates(graph: Graph, log_alpha: int, cfg: GateConfig, rng: np.random.Generator | None = None,
                 u: np.ndarray | None = None, batch: int | None = None) -> int:
    """Draw one reparameterized gate sample per weight.

    ``log_alpha`` is a graph node; the returned node is differentiable in it.
    Pass ``u`` to fix the uniform noise. With ``batch`` set, an independent
    sample is drawn for each of ``batch`` examples (leading axis).
    """
    shape = graph.value(log_alpha).shape
    if u is None:
        if rng is None:
            raise ValueError("sample_gates needs rng or u")
        u = rng.random((batch, *shape) if batch else shape)
    u = np.clip(u, _U_EPS, 1.0 - _U_EPS)
    noise = graph.const(np.log(u) - np.log1p(-u))
    la = graph.tile(log_alpha, batch) if batch else log_alpha
    pre = graph.add(noise, la)
    s = graph.sigmoid(graph.scale(pre, 1.0 / cfg.beta))
    s_bar = graph.add(graph.scale(s, cfg.zeta - cfg.gamma), graph.const(cfg.gamma))
    return graph.apply("clamp", s_bar, lo=0.0, hi=1.0)


def l0_penalty(graph: Graph, log_alphas, cfg: GateConfig) -> int:
    """Expected number of nonzero gates, summed over all ``log_alphas`` nodes."""
    total = None
    for la in log_alphas:
        term = graph.sum(graph.sigmoid(graph.add(la, graph.const(-cfg.l0_shift))))
        total = term if total is None else graph.add(total, term)
    if total is None:
        raise ValueError("l0_penalty needs at least one gate tensor")
    return total


def expected_l0(log_alphas, cfg: GateConfig) -> float:
    return float(sum(_sigmoid(np.asarray(la, dtype=np.float64) - cfg.l0_shift).sum() for la in log_alphas))


def prob_nonzero(log_alpha, cfg: GateConfig):
    return _sigmoid(np.asarray(log_alpha, dtype=np.float64) - cfg.l0_shift)


def test_mask(log_alpha, cfg: GateConfig) -> np.ndarray:
    """Deterministic evaluation-time mask min(1, max(0, gamma + (zeta - gamma) * Sigmoid(log_alpha)))."""
    la = np.asarray(log_alpha)
    s = _sigmoid(la.astype(np.float64))
    return np.clip(cfg.gamma + (cfg.zeta - cfg.gamma) * s, 0.0, 1.0).astype(la.dtype if la.dtype.kind == "f" else np.float64)


test_mask.__test__ = False  # not a pytest test despite the name
