import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gaitgci.diversity import diversity_loss, nuclear_norm, nuclear_norm_grad
from gaitgci.tensor_core import make_rng

from oracles import nuclear_norm_oracle


def test_nuclear_norm_examples():
    assert nuclear_norm(np.eye(3)) == pytest.approx(3.0, abs=1e-14)
    u = np.array([2.0, 0.0, 0.0])
    v = np.array([0.0, 3.0 * 0.6, 3.0 * 0.8, 0.0])
    assert nuclear_norm(np.outer(u, v)) == pytest.approx(6.0, abs=1e-12)


def test_nuclear_norm_matches_eigen_oracle():
    W = make_rng(0).standard_normal((5, 4))
    assert abs(nuclear_norm(W) - nuclear_norm_oracle(W)) <= 1e-8


def test_grad_examples():
    np.testing.assert_allclose(nuclear_norm_grad(np.diag([2.0, 1.0])), np.eye(2), atol=1e-14)
    t = 0.7
    R = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    np.testing.assert_allclose(nuclear_norm_grad(R), R, atol=1e-14)


def test_zero_matrix_has_zero_grad():
    assert np.all(nuclear_norm_grad(np.zeros((3, 2))) == 0.0)


def test_diversity_examples():
    z = np.zeros((3, 2))
    term = diversity_loss(z, z, z, z)
    assert term.value == 0.0
    assert all(np.all(g == 0) for g in term.grads.values())
    assert diversity_loss(np.eye(2), z, z, z).value == pytest.approx(-2.0, abs=1e-14)


def test_diversity_matches_four_oracles():
    rng = make_rng(1)
    mats = [rng.standard_normal(s) for s in ((4, 3), (9, 3), (4, 3), (9, 3))]
    term = diversity_loss(*mats)
    assert abs(term.value + sum(nuclear_norm_oracle(m) for m in mats)) <= 1e-8
    assert all(n >= 0 for n in term.norms.values())
    np.testing.assert_allclose(term.grads["Q_A"], -nuclear_norm_grad(mats[1]), atol=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-5, 5).filter(lambda c: abs(c) > 1e-3))
def test_scaling_and_orthogonal_invariance(seed, c):
    rng = make_rng(seed)
    W = rng.standard_normal((6, 4))
    Q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    base = nuclear_norm(W)
    assert abs(nuclear_norm(c * W) - abs(c) * base) <= 1e-10 * max(1, abs(c) * base)
    assert abs(nuclear_norm(Q @ W) - base) <= 1e-8


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ascent_step_increases_norm(seed):
    W = make_rng(seed).standard_normal((5, 3))
    assert nuclear_norm(W + 1e-2 * nuclear_norm_grad(W)) > nuclear_norm(W)


def test_descent_on_diversity_loss_grows_every_basis():
    rng = make_rng(2)
    mats = {k: 0.1 * rng.standard_normal(s) for k, s in zip(("P_A", "Q_A", "P_C", "Q_C"), ((4, 3), (9, 3), (4, 3), (9, 3)))}
    start = {k: nuclear_norm(v) for k, v in mats.items()}
    for _ in range(100):
        term = diversity_loss(**mats)
        mats = {k: v - 1e-2 * term.grads[k] for k, v in mats.items()}
    for k, v in mats.items():
        assert nuclear_norm(v) > start[k]
