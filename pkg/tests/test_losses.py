import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from holistic.diffcore import Graph, backward
from holistic.gates import GateConfig, sample_gates
from holistic.losses import (VARIANTS, LossSpec, compose, cross_entropy, cvar_wrap, robust_cross_entropy,
                             subset_size, top_a_mean)
from holistic.network import MLPParams, bind, forward, glorot_init, input_jacobian


def ce(z, y):
    g = Graph("f64")
    return g.value(cross_entropy(g, g.const(np.atleast_2d(z)), np.atleast_1d(y)))


def cvar_min(losses, a):
    g_vals = []
    for t in losses:
        g = Graph("f64")
        g_vals.append(float(g.value(cvar_wrap(g, g.const(np.asarray(losses, float)), g.const(np.array(t)), a))))
    return min(g_vals)


def test_cross_entropy_examples():
    assert ce([0, 0, 0], 1)[0] == pytest.approx(np.log(3), abs=1e-15)
    assert ce([2, 0, 0], 0)[0] == pytest.approx(np.log(1 + 2 * np.exp(-2)), abs=1e-15)
    assert ce([0, 10], 1)[0] == pytest.approx(4.5398899e-5, rel=1e-6)


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        ce([0, 0], 2)


def test_robust_identity_net():
    g = Graph("f64")
    tr = forward(g, bind(g, MLPParams([np.eye(2)], [np.zeros(2)]), trainable=False), np.zeros((1, 2)))
    out = g.value(robust_cross_entropy(g, tr.logits, input_jacobian(g, tr), np.array([0]), 0.1))
    assert out[0] == pytest.approx(np.log(1 + np.exp(0.2)), abs=1e-14)
    assert out[0] == pytest.approx(0.7981, abs=1e-4)


def test_robust_rho_zero_and_negative():
    p = glorot_init((3, 5, 4), 0)
    x, y = np.random.default_rng(0).normal(size=(6, 3)), np.arange(6) % 4
    g = Graph("f64")
    tr = forward(g, bind(g, p, trainable=False), x)
    J = input_jacobian(g, tr)
    np.testing.assert_array_equal(g.value(robust_cross_entropy(g, tr.logits, J, y, 0.0)),
                                  g.value(cross_entropy(g, tr.logits, y)))
    with pytest.raises(ValueError):
        robust_cross_entropy(g, tr.logits, J, y, -1.0)


@pytest.mark.parametrize("a,expected", [(4, 2.5), (1, 4.0), (2, 3.5)])
def test_cvar_examples(a, expected):
    assert cvar_min([1, 2, 3, 4], a) == pytest.approx(expected, abs=1e-15)
    assert top_a_mean([1, 2, 3, 4], a) == expected


def test_cvar_a_range():
    g = Graph("f64")
    with pytest.raises(ValueError):
        cvar_wrap(g, g.const(np.ones(3)), g.const(np.array(0.0)), 4)


def test_subset_size():
    assert subset_size(0.7, 128) == 90 and subset_size(0.001, 5) == 1


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 9), elements=st.floats(-100, 100)), st.data())
def test_cvar_dual_equals_primal(losses, data):
    a = data.draw(st.integers(1, len(losses)))
    brute = max(np.mean(losses[list(c)]) for c in itertools.combinations(range(len(losses)), a))
    assert cvar_min(losses, a) == pytest.approx(brute, abs=1e-9)
    # the a-th largest loss attains the optimum
    theta = np.sort(losses)[::-1][a - 1]
    g = Graph("f64")
    v = float(g.value(cvar_wrap(g, g.const(losses), g.const(np.array(theta)), a)))
    assert v == pytest.approx(brute, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1))
def test_robust_dominates(seed, rho):
    rng = np.random.default_rng(seed)
    p = glorot_init((5, 6, 3), seed)
    x, y = rng.normal(size=(8, 5)), rng.integers(0, 3, 8)
    g = Graph("f64")
    tr = forward(g, bind(g, p, trainable=False), x)
    r = g.value(robust_cross_entropy(g, tr.logits, input_jacobian(g, tr), y, rho))
    assert np.all(r >= g.value(cross_entropy(g, tr.logits, y)))


def _objective(spec, params, x, y, theta=None, seed=0):
    g = Graph("f64")
    bound = bind(g, params)
    th = g.param(np.array(theta)) if theta is not None else None
    return g, float(g.value(compose(spec, g, x, y, bound, theta=th, rng=np.random.default_rng(seed))))


def test_all_flags_off_is_mean_ce():
    p = glorot_init((4, 5, 3), 0)
    x, y = np.random.default_rng(0).normal(size=(7, 4)), np.arange(7) % 3
    g = Graph("f64")
    tr = forward(g, bind(g, p, trainable=False), x)
    _, v = _objective(LossSpec(), p, x, y)
    assert v == pytest.approx(g.value(cross_entropy(g, tr.logits, y)).mean(), abs=1e-15)


def test_degenerate_coefficients_equal_nominal():
    p = glorot_init((4, 5, 3), 0, gated=True)
    x, y = np.random.default_rng(0).normal(size=(7, 4)), np.arange(7) % 3
    _, v0 = _objective(LossSpec.variant("sparse", lam=0.0), p, x, y)
    _, v1 = _objective(LossSpec.variant("robust_sparse", rho=0.0, lam=0.0), p, x, y)
    assert v0 == v1


def test_hdl_compositional_oracle():
    cfg = GateConfig()
    spec = LossSpec.variant("hdl", rho=0.05, lam=0.01, gate=cfg, a_fraction=0.6)
    p = glorot_init((4, 5, 3), 3, gated=True)
    rng = np.random.default_rng(3)
    x, y, theta = rng.normal(size=(5, 4)), rng.integers(0, 3, 5), 0.4
    _, value = _objective(spec, p, x, y, theta=theta, seed=9)

    # assemble by hand from the individual operations, with the same gate noise
    g = Graph("f64")
    bound = bind(g, p)
    noise = np.random.default_rng(9)
    masks = [sample_gates(g, la, cfg, noise) for la in bound.log_alpha]
    tr = forward(g, bound, x, masks=masks)
    per = g.value(robust_cross_entropy(g, tr.logits, input_jacobian(g, tr), y, 0.05))
    a = subset_size(0.6, 5)
    shift = cfg.beta * np.log(-cfg.gamma / cfg.zeta)
    l0 = sum((1 / (1 + np.exp(-(la - shift)))).sum() for la in p.log_alpha)
    manual = theta + np.maximum(per - theta, 0).sum() / a + 0.01 * l0
    assert value == pytest.approx(manual, abs=1e-12)


@pytest.mark.parametrize("variant", list(VARIANTS))
def test_backward_reaches_used_params(variant):
    spec = LossSpec.variant(variant, rho=0.1, lam=0.1)
    p = glorot_init((4, 5, 3), 1, gated=spec.sparse)
    x, y = np.random.default_rng(1).normal(size=(6, 4)), np.arange(6) % 3
    g = Graph("f64")
    bound = bind(g, p)
    th = g.param(np.array(0.5)) if spec.stable else None
    grads = backward(g, compose(spec, g, x, y, bound, theta=th, rng=np.random.default_rng(0)))
    for name, nid in bound.all_nodes().items():
        assert np.abs(grads[nid]).sum() > 0, name
    if spec.stable:
        assert grads[th] != 0


def test_compose_errors():
    p = glorot_init((4, 5, 3), 1)
    x, y = np.ones((2, 4)), np.array([0, 1])
    g = Graph("f64")
    with pytest.raises(ValueError, match="gate"):
        compose(LossSpec.variant("sparse", lam=0.1), g, x, y, bind(g, p), rng=np.random.default_rng(0))
    with pytest.raises(ValueError, match="theta"):
        compose(LossSpec.variant("stable"), g, x, y, bind(g, p))


@pytest.mark.parametrize("kw", [{"rho": -1}, {"lam": -1}, {"a_fraction": 0}, {"a_fraction": 1.5},
                                {"weight_decay": -1}])
def test_lossspec_validation(kw):
    with pytest.raises(ValueError):
        LossSpec(**kw)


def test_resolved_drops_unused():
    r = LossSpec.variant("nominal", rho=0.3, lam=0.2).resolved()
    assert "rho" not in r and "lam" not in r and r["variant"] == "nominal"
