import math

import numpy as np
import pytest

from gaitgci.cil import (
    AttentionMaps,
    EffectLogits,
    counterfactual_loss,
    cross_entropy,
    generate_attention,
    intervention_likelihoods,
    predefined_counterfactual,
)
from gaitgci.dcdc import DcdcKernelSet
from gaitgci.errors import ShapeError
from gaitgci.tensor_core import make_rng

from oracles import likelihood_loops, neg_log_softmax


def _zero_gen(cin=8, M=2):
    ks = DcdcKernelSet.init(cin, M, 3, 3, 4, make_rng(0))
    return DcdcKernelSet(*(np.zeros_like(v) for v in ks.params().values()))


def test_zero_generator_gives_half_maps():
    maps = generate_attention(_zero_gen(), make_rng(1).standard_normal((8, 5, 4)))
    assert maps.kind == "factual" and np.all(maps.maps == 0.5)


def test_generated_maps_depend_on_input():
    ks = DcdcKernelSet.init(8, 2, 3, 3, 4, make_rng(2))
    X1, X2 = make_rng(3).standard_normal((2, 8, 5, 4))
    a, b = generate_attention(ks, X1), generate_attention(ks, X2, "counterfactual")
    assert np.abs(a.maps - b.maps).max() > 0 and b.kind == "counterfactual"


def test_eight_maps_shape():
    ks = DcdcKernelSet.init(16, 8, 3, 8, 4, make_rng(4))
    assert generate_attention(ks, make_rng(5).standard_normal((16, 6, 6))).maps.shape == (8, 6, 6)


def test_attention_maps_validation():
    with pytest.raises(ValueError):
        AttentionMaps("factual", np.full((1, 2, 2), 1.5))
    with pytest.raises(ValueError):
        AttentionMaps("other", np.full((1, 2, 2), 0.5))
    with pytest.raises(ShapeError):
        AttentionMaps("factual", np.full((2, 2), 0.5))


def test_predefined_determinism_and_range():
    a = predefined_counterfactual((2, 4, 3), "uniform", seed=7)
    b = predefined_counterfactual((2, 4, 3), "uniform", seed=7)
    assert np.array_equal(a.maps, b.maps)
    n = predefined_counterfactual((2, 40, 30), "normal", seed=8).maps
    assert np.all((n > 0) & (n < 1))
    with pytest.raises(ValueError):
        predefined_counterfactual((1, 2, 2), "laplace")


def test_uniform_mean_law_of_large_numbers():
    u = predefined_counterfactual((1, 1000, 1000), "uniform", seed=9).maps
    assert abs(u.mean() - 0.5) <= 0.002
    assert u.min() > 0


def _instance(seed, M=2, C=5, K=4):
    rng = make_rng(seed)
    X = rng.standard_normal((C, 4, 3))
    A = AttentionMaps("factual", rng.random((M, 4, 3)))
    Cm = AttentionMaps("counterfactual", rng.random((M, 4, 3)))
    head = rng.standard_normal((K, C))
    return X, A, Cm, head


def test_equal_maps_give_exactly_zero_effect():
    X, A, _, head = _instance(10)
    e = intervention_likelihoods(X, A, AttentionMaps("counterfactual", A.maps.copy()), head)
    assert np.all(e.y_e == 0.0)


def test_all_ones_single_map_is_plain_head():
    X, _, _, head = _instance(11)
    ones = AttentionMaps("factual", np.ones((1, 4, 3)))
    e = intervention_likelihoods(X, ones, ones, head)
    np.testing.assert_allclose(e.y_f, head @ X.mean(axis=(1, 2)), atol=1e-14)


def test_likelihood_matches_loops():
    X, A, Cm, head = _instance(12)
    e = intervention_likelihoods(X, A, Cm, head)
    np.testing.assert_allclose(e.y_f, likelihood_loops(X, A.maps, head), atol=1e-12)
    np.testing.assert_allclose(e.y_cf, likelihood_loops(X, Cm.maps, head), atol=1e-12)
    assert np.array_equal(e.y_e, e.y_f - e.y_cf)


def test_likelihood_shape_errors():
    X, A, Cm, head = _instance(13)
    with pytest.raises(ShapeError):
        intervention_likelihoods(X[:, :3], A, Cm, head)
    with pytest.raises(ShapeError):
        intervention_likelihoods(X, A, AttentionMaps("counterfactual", np.full((3, 4, 3), 0.5)), head)


def test_shift_invariance_of_effect():
    # dyadic values, so every sum and difference is exact in binary floating point
    y_f = np.array([0.375, -1.25, 2.0])
    y_cf = np.array([0.125, 0.5, -0.5])
    a = EffectLogits.from_pair(y_f, y_cf)
    b = EffectLogits.from_pair(y_f + 0.25, y_cf + 0.25)
    assert np.array_equal(a.y_e, b.y_e)
    assert counterfactual_loss(a, 1) == counterfactual_loss(b, 1)


@pytest.mark.parametrize("K", [2, 4, 10])
def test_zero_effect_loss_is_log_k(K):
    assert counterfactual_loss(EffectLogits.from_pair(np.zeros(K), np.zeros(K)), 0) == math.log(K)


def test_saturated_effect_loss_is_tiny():
    ye = np.zeros(4)
    ye[2] = 20.0
    assert counterfactual_loss(EffectLogits.from_pair(ye, np.zeros(4)), 2) < 1e-8


def test_loss_matches_scalar_oracle():
    ye = make_rng(14).standard_normal(5)
    for y in range(5):
        got = counterfactual_loss(EffectLogits.from_pair(ye, np.zeros(5)), y)
        assert abs(got - neg_log_softmax(list(ye), y)) <= 1e-12


def test_loss_label_range():
    with pytest.raises(ValueError):
        counterfactual_loss(EffectLogits.from_pair(np.zeros(3), np.zeros(3)), 3)
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((2, 3)), [0, -1])
