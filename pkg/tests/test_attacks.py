import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from holistic.attacks import AttackConfig, corner_oracle, fgsm, pgd
from holistic.network import Classifier, MLPParams, glorot_init


def linear_model(W, b=None):
    W = np.asarray(W, dtype=float)
    return Classifier.from_params(MLPParams([W], [np.zeros(W.shape[0]) if b is None else np.asarray(b, float)]))


def test_fgsm_zero_radius():
    m = linear_model([[1.0, 2.0], [0.0, -1.0]])
    x = np.array([[0.3, -0.2]])
    np.testing.assert_array_equal(fgsm(m, x, np.array([0]), 0.0), x)


def test_fgsm_linear_margin():
    m = linear_model([[0.0, 0.0], [3.0, -1.0]])
    x, y = np.zeros((1, 2)), np.array([0])
    xa = fgsm(m, x, y, 0.1)
    np.testing.assert_allclose(xa, [[0.1, -0.1]])
    z0, z1 = m.logits(x)[0], m.logits(xa)[0]
    assert (z1[1] - z1[0]) - (z0[1] - z0[0]) == pytest.approx(0.4)


def test_fgsm_zero_gradient():
    m = linear_model([[1.0, 1.0], [1.0, 1.0]])
    x = np.array([[0.5, 0.5]])
    np.testing.assert_array_equal(fgsm(m, x, np.array([1]), 0.3), x)


def test_pgd_single_step_is_fgsm():
    p = glorot_init((5, 7, 3), 0)
    m = Classifier.from_params(p)
    x, y = np.random.default_rng(0).normal(size=(10, 5)), np.arange(10) % 3
    cfg = AttackConfig(radius=0.05, steps=1, step_size=0.05, random_start=False)
    fg = fgsm(m, x, y, 0.05)
    out = pgd(m, x, y, cfg)
    # pgd keeps the clean point if the step did not increase the loss
    l_fg, _ = m.loss_and_input_grad(fg, y)
    l_x, _ = m.loss_and_input_grad(x, y)
    take = l_fg > l_x
    np.testing.assert_array_equal(out[take], fg[take])
    np.testing.assert_array_equal(out[~take], x[~take])


def test_pgd_linear_matches_corner_oracle():
    rng = np.random.default_rng(1)
    W = rng.normal(size=(2, 6))
    m = linear_model(W)
    x, y, rho = rng.normal(size=(4, 6)), np.array([0, 1, 0, 1]), 0.2
    xa = pgd(m, x, y, AttackConfig(radius=rho, seed=3))
    loss, _ = m.loss_and_input_grad(xa, y)
    for i in range(4):
        g = W[1 - y[i]] - W[y[i]]
        val, _ = corner_oracle(g, rho)
        margin = (W[1 - y[i]] - W[y[i]]) @ x[i] + val
        assert loss[i] == pytest.approx(np.logaddexp(0, margin), abs=1e-9)


def test_corner_oracle_examples():
    val, corner = corner_oracle(np.array([1.0, -2.0, 0.0]), 0.1)
    assert val == pytest.approx(0.3, abs=1e-15)
    np.testing.assert_allclose(corner[:2], [0.1, -0.1])
    assert corner_oracle(np.zeros(4), 0.5)[0] == 0.0
    g = np.random.default_rng(2).normal(size=10)
    assert abs(corner_oracle(g, 0.3)[0] - 0.3 * np.abs(g).sum()) < 1e-12


def test_corner_oracle_too_large():
    with pytest.raises(ValueError):
        corner_oracle(np.ones(21), 0.1)


@pytest.mark.parametrize("kw", [{"radius": -1}, {"radius": 1, "steps": 0}, {"radius": 1, "restarts": 0},
                                {"radius": 1, "step_size": 0}])
def test_attack_config_validation(kw):
    with pytest.raises(ValueError):
        AttackConfig(**kw)


def test_default_step_size():
    assert AttackConfig(radius=0.1).alpha == pytest.approx(2.5 * 0.1 / 40)


def test_clip_respected():
    m = Classifier.from_params(glorot_init((4, 5, 3), 0))
    x = np.random.default_rng(0).uniform(size=(20, 4))
    xa = pgd(m, x, np.arange(20) % 3, AttackConfig(radius=0.3, clip=(0.0, 1.0)))
    assert xa.min() >= 0 and xa.max() <= 1


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1e-3, 1e-2, 1e-1, 1.0]), st.integers(1, 2))
def test_pgd_projection_and_monotone(seed, rho, restarts):
    rng = np.random.default_rng(seed)
    m = Classifier.from_params(glorot_init((4, 6, 3), seed))
    x, y = rng.normal(size=(12, 4)), rng.integers(0, 3, 12)
    xa, fooled = pgd(m, x, y, AttackConfig(radius=rho, steps=5, restarts=restarts, seed=seed), return_fooled=True)
    assert np.abs(xa - x).max() <= rho + 1e-12
    assert np.all(m.loss_and_input_grad(xa, y)[0] >= m.loss_and_input_grad(x, y)[0])
    assert np.all(fooled[m.predict(x) != y])


def test_pgd_reproducible():
    m = Classifier.from_params(glorot_init((4, 6, 3), 0))
    x, y = np.random.default_rng(0).normal(size=(12, 4)), np.arange(12) % 3
    cfg = AttackConfig(radius=0.1, seed=5)
    np.testing.assert_array_equal(pgd(m, x, y, cfg), pgd(m, x, y, cfg))


def test_pgd_at_small_radius_below_linear_bound():
    """The linearized upper bound dominates the empirical worst case for tiny balls."""
    from holistic.diffcore import Graph
    from holistic.losses import robust_cross_entropy
    from holistic.network import bind, forward, input_jacobian

    rng = np.random.default_rng(4)
    ok, total = 0, 0
    for net in range(20):
        p = glorot_init((4, 6, 3), net)
        m = Classifier.from_params(p)
        x, y = rng.normal(size=(10, 4)), rng.integers(0, 3, 10)
        g = Graph("f64")
        tr = forward(g, bind(g, p, trainable=False), x)
        bound = g.value(robust_cross_entropy(g, tr.logits, input_jacobian(g, tr), y, 1e-6))
        emp = m.loss_and_input_grad(pgd(m, x, y, AttackConfig(radius=1e-6, seed=net)), y)[0]
        ok += int(np.sum(bound >= emp - 1e-12))
        total += len(y)
    assert ok / total >= 0.95
