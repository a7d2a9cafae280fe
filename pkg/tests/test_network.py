import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from holistic.diffcore import Graph, backward
from holistic.gates import GateConfig
from holistic.network import (Classifier, MLPParams, bind, effective_weights, forward, glorot_init,
                              input_jacobian, load_checkpoint, save_checkpoint)


def hand_net():
    W1 = np.array([[1.0, -1.0], [2.0, 0.0]])
    W2 = np.array([[1.0, 1.0]])
    return MLPParams([W1, W2], [np.zeros(2), np.zeros(1)])


def run(params, x, **kw):
    g = Graph("f64")
    tr = forward(g, bind(g, params, trainable=False), np.atleast_2d(x), **kw)
    return g, tr


def test_glorot_bound_and_zero_bias():
    p = glorot_init((4, 3), seed=11)
    assert p.weights[0].shape == (3, 4)
    assert np.abs(p.weights[0]).max() <= np.sqrt(6 / 7)
    assert not p.biases[0].any()


def test_glorot_deterministic():
    a, b = glorot_init((5, 4, 2), 3, gated=True), glorot_init((5, 4, 2), 3, gated=True)
    for k, v in a.arrays().items():
        np.testing.assert_array_equal(v, b.arrays()[k])


def test_glorot_variance():
    W = glorot_init((400, 250), 0).weights[0]
    L = np.sqrt(6 / 650)
    assert W.var() == pytest.approx(L**2 / 3, rel=0.05)


@pytest.mark.parametrize("sizes", [(), (3,), (3, 0, 2)])
def test_glorot_rejects_bad_sizes(sizes):
    with pytest.raises(ValueError):
        glorot_init(sizes, 0)


def test_hand_forward_and_jacobian():
    g, tr = run(hand_net(), [1.0, 1.0])
    assert g.value(tr.logits)[0, 0] == 2.0
    np.testing.assert_array_equal(tr.patterns[0][0], [False, True])
    np.testing.assert_array_equal(g.value(input_jacobian(g, tr))[0], [[2.0, 0.0]])


def test_linear_jacobian_is_w():
    W = np.random.default_rng(0).normal(size=(3, 5))
    g, tr = run(MLPParams([W], [np.zeros(3)]), np.ones(5))
    np.testing.assert_array_equal(g.value(input_jacobian(g, tr))[0], W)


def test_zero_masks_annihilate():
    p = glorot_init((4, 6, 3), 0)
    g = Graph("f64")
    bound = bind(g, p)
    masks = [g.const(np.zeros_like(w)) for w in p.weights]
    tr = forward(g, bound, np.ones((2, 4)), masks=masks)
    np.testing.assert_array_equal(g.value(tr.logits), 0.0)


def test_masked_weight_does_not_matter():
    p = glorot_init((4, 6, 3), 1)
    m = [np.ones_like(w) for w in p.weights]
    m[0][2, 1] = 0.0
    x = np.random.default_rng(0).normal(size=(3, 4))

    def logits(params):
        g = Graph("f64")
        tr = forward(g, bind(g, params), x, masks=[g.const(mm) for mm in m])
        return g.value(tr.logits)

    base = logits(p)
    for d in (10.0, -10.0):
        q = p.copy()
        q.weights[0][2, 1] += d
        np.testing.assert_array_equal(logits(q), base)


def test_dropout_zero_train_equals_eval():
    p = glorot_init((4, 6, 3), 2)
    x = np.random.default_rng(1).normal(size=(5, 4))
    g1, t1 = run(p, x, mode="eval")
    g2, t2 = run(p, x, mode="train", dropout_rate=0.0, rng=np.random.default_rng(0))
    np.testing.assert_array_equal(g1.value(t1.logits), g2.value(t2.logits))


def test_dropout_needs_rng_and_scales():
    p = glorot_init((4, 6, 3), 2)
    with pytest.raises(ValueError):
        run(p, np.ones((2, 4)), mode="train", dropout_rate=0.5)
    _, tr = run(p, np.ones((2, 4)), mode="train", dropout_rate=0.5, rng=np.random.default_rng(0))
    assert set(np.unique(tr.dropout_masks[0])) <= {0.0, 2.0}


def test_forward_dimension_mismatch():
    with pytest.raises(ValueError, match="fan_in"):
        run(glorot_init((4, 3), 0), np.ones((2, 5)))


def test_jacobian_vs_finite_differences():
    rng = np.random.default_rng(5)
    p = glorot_init((5, 8, 3), 4)
    clf = Classifier.from_params(p)
    for _ in range(5):
        while True:
            x = rng.normal(size=(1, 5))
            z1 = x @ p.weights[0].T
            if np.abs(z1).min() > 1e-4:
                break
        g, tr = run(p, x)
        J = g.value(input_jacobian(g, tr))[0]
        h = 1e-7
        for i in range(5):
            e = np.zeros((1, 5))
            e[0, i] = h
            fd = (clf.logits(x + e) - clf.logits(x - e))[0] / (2 * h)
            np.testing.assert_allclose(J[:, i], fd, rtol=1e-6, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_piecewise_linearity(seed):
    rng = np.random.default_rng(seed)
    p = glorot_init((4, 7, 5, 3), seed)
    x = rng.normal(size=(1, 4))
    g, tr = run(p, x)
    J = g.value(input_jacobian(g, tr))[0]
    # largest step that cannot flip any hidden unit: margin / row l1 norm bounds
    pre, h, margin = [], x, np.inf
    for i, (W, b) in enumerate(zip(p.weights[:-1], p.biases[:-1])):
        z = h @ W.T + b
        pre.append(z)
        h = np.maximum(z, 0)
    J1 = np.abs(p.weights[0]).sum(axis=1)
    margin = np.abs(pre[0][0]).min() / J1.max()
    # second layer: its preactivation moves by at most |J_2| * eps with J_2 the partial Jacobian
    g2, tr2 = run(MLPParams(p.weights[:2], p.biases[:2]), x)
    J2 = np.abs(g2.value(input_jacobian(g2, tr2))[0]).sum(axis=1)
    margin = min(margin, np.abs(pre[1][0]).min() / J2.max())
    delta = rng.uniform(-1, 1, size=(1, 4)) * margin * 0.5
    lin = g.value(tr.logits)[0] + J @ delta[0]
    np.testing.assert_allclose(Classifier.from_params(p).logits(x + delta)[0], lin, atol=1e-9)


def test_eval_forward_deterministic():
    p = glorot_init((4, 6, 3), 2)
    x = np.random.default_rng(1).normal(size=(5, 4))
    np.testing.assert_array_equal(run(p, x)[0].value(run(p, x)[1].logits), run(p, x)[0].value(run(p, x)[1].logits))
    clf = Classifier.from_params(p)
    np.testing.assert_array_equal(clf.logits(x), clf.logits(x))


def test_classifier_matches_graph_forward():
    p = glorot_init((4, 6, 3), 2, gated=True)
    cfg = GateConfig()
    x = np.random.default_rng(1).normal(size=(5, 4))
    g = Graph("f64")
    masks = [g.const(w / np.where(wt == 0, 1, wt)) for w, wt in zip(effective_weights(p, cfg), p.weights)]
    tr = forward(g, bind(g, p), x, masks=masks)
    np.testing.assert_allclose(Classifier.from_params(p, cfg).logits(x), g.value(tr.logits), atol=1e-12)


def test_input_grad_matches_fd():
    p = glorot_init((4, 6, 3), 7)
    clf = Classifier.from_params(p)
    x = np.random.default_rng(2).normal(size=(2, 4))
    y = np.array([0, 2])
    loss, gx = clf.loss_and_input_grad(x, y)
    h = 1e-6
    for i in range(4):
        e = np.zeros_like(x)
        e[:, i] = h
        fd = (clf.loss_and_input_grad(x + e, y)[0] - clf.loss_and_input_grad(x - e, y)[0]) / (2 * h)
        np.testing.assert_allclose(gx[:, i], fd, rtol=1e-5, atol=1e-8)


def test_jacobian_grad_reaches_weights():
    p = glorot_init((3, 4, 2), 0)
    g = Graph("f64")
    bound = bind(g, p)
    tr = forward(g, bound, np.random.default_rng(0).normal(size=(2, 3)))
    grads = backward(g, g.sum(g.apply("abs", input_jacobian(g, tr))))
    assert np.abs(grads[bound.weights[0]]).sum() > 0


def test_checkpoint_roundtrip(tmp_path):
    p = glorot_init((4, 6, 3), 2, gated=True)
    cfg = GateConfig(beta=0.5)
    path = save_checkpoint(tmp_path / "m.npz", p, cfg, "f64", {"note": "x"})
    q, cfg2, header = load_checkpoint(path)
    assert cfg2 == cfg and header["meta"] == {"note": "x"} and header["layer_sizes"] == [4, 6, 3]
    for k, v in p.arrays().items():
        np.testing.assert_array_equal(v, q.arrays()[k])


def test_checkpoint_rejects_foreign(tmp_path):
    np.savez(tmp_path / "x.npz", header=np.array(json.dumps({"format": "other"})))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.npz")


def test_params_validation():
    with pytest.raises(ValueError):
        MLPParams([np.ones((3, 2)), np.ones((2, 4))], [np.zeros(3), np.zeros(2)])
    with pytest.raises(ValueError):
        MLPParams([np.full((2, 2), np.nan)], [np.zeros(2)])
