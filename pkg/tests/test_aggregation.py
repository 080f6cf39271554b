import numpy as np
import pytest

from forgesim.aggregation import (AggregationConfig, ClientUpdate, adaptive_aggregate, adaptive_displacement,
                                  aggregation_objective, brute_force_minimizer, dense_displacement,
                                  fedavg_anchor, sampled_weights)
from forgesim.errors import ConfigurationError, DataIntegrityError, EmptyRoundError
from forgesim.model import Layout, ParamVector


def _theta7():
    # smallest layout: 7 parameters
    return ParamVector(np.zeros(7), Layout(1, 1, 1, 1, 1))


def test_sampled_weights():
    assert np.allclose(sampled_weights([0.3, 0.7], [True, True], [1.0, 1.0]), [0.3, 0.7])
    assert np.allclose(sampled_weights([0.3, 0.7], [True, True], [0.5, 1.0]), [0.6, 0.7])
    assert np.allclose(sampled_weights([0.3, 0.7], [False, True], [0.5, 1.0]), [0.0, 0.7])
    with pytest.raises(ConfigurationError):
        sampled_weights([0.5, 0.5], [True, True], [0.0, 1.0])


def test_fedavg_anchor_hand_cases():
    theta = _theta7()
    g1, g2 = np.zeros(7), np.zeros(7)
    g1[0], g2[1] = 2.0, 2.0
    out = fedavg_anchor(theta, [ClientUpdate(0, g1, 1), ClientUpdate(1, g2, 1)], [0.5, 0.5])
    assert np.allclose(out.values[:2], [1.0, 1.0])
    g1[0], g2[1] = 1.0, 1.0
    out = fedavg_anchor(theta, [ClientUpdate(1, g2, 1), ClientUpdate(0, g1, 1)], [0.6, 0.7])
    assert np.allclose(out.values[:2], [0.6, 0.7])
    g = np.arange(7.0)
    out = fedavg_anchor(theta, [ClientUpdate(0, g, 1), ClientUpdate(1, g, 1)], [0.25, 0.75])
    assert np.allclose(out.values, g)
    with pytest.raises(EmptyRoundError):
        fedavg_anchor(theta, [ClientUpdate(0, g, 1)], [0.0])


def test_single_client_hand_value():
    d = adaptive_displacement(np.array([[1.0, 0.0]]), np.array([1.0]), AggregationConfig(0.1, 1.0))
    assert np.allclose(d, [12 / 7, 0.0])
    oracle = brute_force_minimizer(np.zeros(2), np.array([[1.0, 0.0]]), np.array([1.0]), AggregationConfig(0.1, 1.0))
    assert np.allclose(oracle, d, atol=1e-9)


def test_single_client_preserves_update():
    g = np.array([[0.3, -1.2, 2.0]])
    d = adaptive_displacement(g, np.array([1.0]), AggregationConfig(0.1, 1e-12))
    assert np.allclose(d, g[0])


def test_antiparallel_cancels():
    G = np.array([[1.0, 0.0], [-1.0, 0.0]])
    d = adaptive_displacement(G, np.array([0.5, 0.5]), AggregationConfig(0.1, 1e-12))
    assert np.allclose(d, 0.0, atol=1e-12)


def test_near_antiparallel_blowup():
    delta = 0.01
    G = np.array([[1.0, delta], [-1.0, delta]])
    w = np.array([0.5, 0.5])
    free = adaptive_displacement(G, w, AggregationConfig(0.0, 1e-12))
    anchored = adaptive_displacement(G, w, AggregationConfig(0.1, 1e-12))
    # exact interpolation: a_i . d = 1 for both clients -> d = (0, (1 + delta^2) / delta)
    assert np.allclose(free, [0.0, (1 + delta**2) / delta])
    assert np.linalg.norm(free) >= 50 and np.linalg.norm(anchored) <= 5


def _random_instance(rng):
    dim = int(rng.integers(2, 51))
    S = int(rng.integers(1, 11))
    G = rng.normal(size=(S, dim)) * rng.uniform(0.1, 3.0, size=(S, 1))
    w = rng.dirichlet(np.ones(S))
    return G, w


def test_low_rank_matches_dense_and_objective_minimum():
    rng = np.random.default_rng(0)
    for _ in range(30):
        G, w = _random_instance(rng)
        cfg = AggregationConfig(float(rng.choice([0.05, 0.1, 0.2])), 1e-8)
        d = adaptive_displacement(G, w, cfg)
        assert np.allclose(d, dense_displacement(G, w, cfg), atol=1e-8, rtol=1e-8)
        f0 = aggregation_objective(d, G, w, cfg)
        for _ in range(3):
            assert aggregation_objective(d + 1e-4 * rng.normal(size=d.shape), G, w, cfg) > f0


def test_alpha_zero_is_min_norm_solution():
    rng = np.random.default_rng(1)
    G = rng.normal(size=(3, 8))
    w = np.array([0.2, 0.3, 0.5])
    d = adaptive_displacement(G, w, AggregationConfig(0.0, 1e-8))
    A = G / (np.sum(G * G, axis=1, keepdims=True) + 1e-8)
    ref = np.linalg.pinv(np.sqrt(w)[:, None] * A) @ np.sqrt(w)
    assert np.allclose(d, ref)
    assert np.allclose(A @ d, 1.0)


def test_zero_weight_clients_ignored_and_errors():
    G = np.array([[1.0, 2.0], [3.0, -1.0]])
    cfg = AggregationConfig()
    assert np.allclose(adaptive_displacement(G, np.array([1.0, 0.0]), cfg),
                       adaptive_displacement(G[:1], np.array([1.0]), cfg))
    with pytest.raises(EmptyRoundError):
        adaptive_displacement(G, np.zeros(2), cfg)
    theta = _theta7()
    with pytest.raises(DataIntegrityError):
        adaptive_aggregate(theta, [ClientUpdate(0, np.full(7, np.nan), 1)], [1.0], cfg)
    with pytest.raises(ConfigurationError):
        brute_force_minimizer(np.zeros(2), G, np.ones(2), AggregationConfig(0.0))
    with pytest.raises(ConfigurationError):
        AggregationConfig(eps_ag=0.0)


def test_aggregate_uses_client_ids():
    theta = _theta7()
    rng = np.random.default_rng(5)
    g = rng.normal(size=(2, 7))
    w_tilde = np.array([0.0, 0.0, 0.4, 0.0, 0.6])
    ups = [ClientUpdate(4, g[1], 3), ClientUpdate(2, g[0], 2)]
    out = adaptive_aggregate(theta, ups, w_tilde, AggregationConfig())
    assert np.allclose(out.values, adaptive_displacement(g, np.array([0.4, 0.6]), AggregationConfig()))
    oracle = brute_force_minimizer(theta, ups, w_tilde, AggregationConfig())
    assert np.allclose(out.values, oracle.values, atol=1e-9)


def test_anchor_limit():
    rng = np.random.default_rng(2)
    G, w = rng.normal(size=(4, 10)), rng.dirichlet(np.ones(4))
    anchor = w @ G
    dist = [np.linalg.norm(adaptive_displacement(G, w, AggregationConfig(10.0**k)) - anchor) for k in range(7)]
    assert all(b < a for a, b in zip(dist, dist[1:]))
    assert dist[-1] / np.linalg.norm(anchor) < 1e-4
