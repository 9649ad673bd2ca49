import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import bernoulli_product, enumerate_graphs, gibbs, kl_enumerated
from topotransfer.graph_core import FeasibilityMask
from topotransfer.posterior import (
    EdgeScores,
    RelaxationConfig,
    distribution_from_scores,
    execution_topology,
    kl_divergence,
    kl_gradient_logits,
    logistic_noise,
    posterior_mean,
    relax,
    sample_relaxed,
)


def all_masks(n):
    off = [(i, j) for i in range(n) for j in range(n) if i != j]
    for bits in itertools.product((False, True), repeat=len(off)):
        allowed = np.zeros((n, n), dtype=bool)
        for (i, j), b in zip(off, bits):
            allowed[i, j] = b
        yield FeasibilityMask(allowed)


def test_probability_examples():
    mask = FeasibilityMask(np.array([[False, True], [False, False]]))
    post = distribution_from_scores(EdgeScores(np.array([[0.0, 0.0], [7.0, 0.0]]), mask))
    assert post.edge_probs[0, 1] == 0.5
    assert post.edge_probs[1, 0] == 0.0


def test_two_node_gibbs_by_hand():
    mask = FeasibilityMask.full(2)
    Z = np.array([[0.0, 0.7], [-1.2, 0.0]])
    graphs = enumerate_graphs(mask.allowed)
    assert len(graphs) == 4
    P = distribution_from_scores(EdgeScores(Z, mask)).edge_probs
    np.testing.assert_allclose(bernoulli_product(P, mask.allowed, graphs), gibbs(Z, graphs), atol=1e-14)


def test_factorization_over_all_small_masks():
    rng = np.random.default_rng(0)
    for n in (2, 3):
        for mask in all_masks(n):
            graphs = enumerate_graphs(mask.allowed)
            for _ in range(3):
                Z = rng.normal(scale=2.0, size=(n, n))
                q = distribution_from_scores(EdgeScores(Z, mask))
                tv = 0.5 * np.abs(bernoulli_product(q.edge_probs, mask.allowed, graphs)
                                  - gibbs(Z * mask.allowed, graphs)).sum()
                assert tv < 1e-9


def test_non_finite_scores_rejected():
    Z = np.zeros((2, 2))
    Z[0, 1] = np.nan
    with pytest.raises(ValueError):
        distribution_from_scores(EdgeScores(Z, FeasibilityMask.full(2)))
    # non-finite values on masked entries are ignored
    Z = np.zeros((2, 2))
    Z[0, 0] = np.inf
    distribution_from_scores(EdgeScores(Z, FeasibilityMask.full(2)))


def test_kl_examples():
    mask = FeasibilityMask.full(3)
    rng = np.random.default_rng(1)
    q = distribution_from_scores(EdgeScores(rng.normal(size=(3, 3)), mask))
    assert kl_divergence(q, q) == 0.0
    single = FeasibilityMask(np.array([[False, True], [False, False]]))
    half = distribution_from_scores(EdgeScores(np.zeros((2, 2)), single))
    assert kl_divergence(half, half) == 0.0


def test_kl_matches_enumeration():
    rng = np.random.default_rng(2)
    for n in (2, 3):
        mask = FeasibilityMask.full(n)
        graphs = enumerate_graphs(mask.allowed)
        for _ in range(10):
            Zq, Zp = rng.normal(scale=2, size=(2, n, n))
            q = distribution_from_scores(EdgeScores(Zq, mask))
            p = distribution_from_scores(EdgeScores(Zp, mask))
            ref = kl_enumerated(gibbs(Zq * mask.allowed, graphs), gibbs(Zp * mask.allowed, graphs))
            assert kl_divergence(q, p) == pytest.approx(ref, abs=1e-9)


def test_kl_mask_mismatch():
    a = distribution_from_scores(EdgeScores(np.zeros((2, 2)), FeasibilityMask.full(2)))
    b = distribution_from_scores(EdgeScores(np.zeros((2, 2)),
                                            FeasibilityMask(np.array([[False, True], [False, False]]))))
    with pytest.raises(ValueError):
        kl_divergence(a, b)


def test_kl_is_additive_over_disjoint_regions():
    rng = np.random.default_rng(3)
    full = FeasibilityMask.full(4)
    split = rng.random((4, 4)) < 0.5
    r1 = FeasibilityMask(full.allowed & split)
    r2 = FeasibilityMask(full.allowed & ~split)
    Zq, Zp = rng.normal(size=(2, 4, 4))

    def kl(mask):
        return kl_divergence(distribution_from_scores(EdgeScores(Zq, mask)),
                             distribution_from_scores(EdgeScores(Zp, mask)))

    assert kl(full) == pytest.approx(kl(r1) + kl(r2), abs=1e-12)


def test_kl_stable_for_extreme_logits():
    mask = FeasibilityMask.full(2)
    q = distribution_from_scores(EdgeScores(np.full((2, 2), 40.0), mask))
    p = distribution_from_scores(EdgeScores(np.full((2, 2), -40.0), mask))
    val = kl_divergence(q, p)
    assert np.isfinite(val) and val == pytest.approx(2 * 40.0, rel=1e-6)


def test_kl_gradient_finite_difference():
    rng = np.random.default_rng(4)
    mask = FeasibilityMask.full(3)
    for _ in range(10):
        a, b = rng.normal(scale=2, size=(2, 3, 3))
        g = kl_gradient_logits(a, b, mask)
        h = 1e-5
        for i, j in np.argwhere(mask.allowed):
            e = np.zeros((3, 3))
            e[i, j] = h

            def f(x):
                return kl_divergence(distribution_from_scores(EdgeScores(x, mask)),
                                     distribution_from_scores(EdgeScores(b, mask)))

            fd = (f(a + e) - f(a - e)) / (2 * h)
            assert g[i, j] == pytest.approx(fd, rel=1e-6, abs=1e-10)


def test_relaxed_flat_limit():
    rng = np.random.default_rng(5)
    mask = FeasibilityMask(np.array([[False, True], [False, False]]))
    noise = logistic_noise(rng, (10_000, 2, 2))
    soft, _ = relax(np.zeros((2, 2)), noise, 1e6, mask)
    assert abs(soft[:, 0, 1].mean() - 0.5) < 0.02


def test_relaxed_large_score_is_almost_always_on():
    rng = np.random.default_rng(6)
    mask = FeasibilityMask(np.array([[False, True], [False, False]]))
    Z = np.array([[0.0, 20.0], [0.0, 0.0]])
    noise = logistic_noise(rng, (10_000, 2, 2))
    soft, hard = relax(Z, noise, 1.0, mask)
    assert hard[:, 0, 1].mean() >= 0.999
    assert np.all(soft[:, 1, 0] == 0) and np.all(hard[:, 1, 0] == 0)


def test_sample_relaxed_shapes_and_mask():
    mask = FeasibilityMask.full(3)
    soft, hard = sample_relaxed(EdgeScores(np.ones((3, 3)), mask), RelaxationConfig(), np.random.default_rng(0))
    assert soft.shape == hard.shape == (3, 3)
    assert np.all(np.diag(soft) == 0) and np.all(np.diag(hard) == 0)
    assert np.all((soft >= 0) & (soft <= 1))


def test_config_seed_is_the_default_generator():
    scores = EdgeScores(np.random.default_rng(0).normal(size=(3, 3)), FeasibilityMask.full(3))
    a = sample_relaxed(scores, RelaxationConfig(seed=4))
    b = sample_relaxed(scores, RelaxationConfig(seed=4))
    c = sample_relaxed(scores, RelaxationConfig(seed=5))
    np.testing.assert_array_equal(a[0], b[0])
    assert not np.array_equal(a[0], c[0])


def test_hard_samples_are_exact_bernoulli():
    rng = np.random.default_rng(7)
    mask = FeasibilityMask.full(2)
    Z = np.array([[0.0, 0.8], [-1.5, 0.0]])
    _, hard = relax(Z, logistic_noise(rng, (200_000, 2, 2)), 0.3, mask)
    p = distribution_from_scores(EdgeScores(Z, mask)).edge_probs
    np.testing.assert_allclose(hard.mean(axis=0), p, atol=0.005)


def test_soft_approaches_hard_as_temperature_drops():
    rng = np.random.default_rng(8)
    mask = FeasibilityMask.full(3)
    Z = rng.normal(size=(3, 3))
    noise = logistic_noise(rng, (5000, 3, 3))
    gaps = []
    for temp in (1.0, 0.1, 0.01):
        soft, hard = relax(Z, noise, temp, mask)
        gaps.append(np.abs(soft - hard).mean())
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 0.01


def test_relaxation_config_validation():
    with pytest.raises(ValueError):
        RelaxationConfig(temperature=0.0)
    with pytest.raises(ValueError):
        RelaxationConfig(mc_samples=0)


def test_execution_topology_examples():
    mask = FeasibilityMask.full(3)
    assert not execution_topology(EdgeScores(-np.ones((3, 3)), mask)).any()
    two = FeasibilityMask(np.array([[False, True], [True, False]]))
    out = execution_topology(EdgeScores(np.array([[0.0, 1.0], [-1.0, 0.0]]), two))
    assert out.tolist() == [[0, 1], [0, 0]]
    # ties at zero are excluded
    assert not execution_topology(EdgeScores(np.zeros((3, 3)), mask)).any()


def test_execution_topology_is_enumerated_argmax():
    rng = np.random.default_rng(9)
    for n in (2, 3):
        for mask in all_masks(n):
            graphs = enumerate_graphs(mask.allowed)
            Z = rng.normal(size=(n, n))
            probs = gibbs(Z * mask.allowed, graphs)
            best = graphs[int(np.argmax(probs))]
            np.testing.assert_array_equal(execution_topology(EdgeScores(Z, mask)), best)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_execution_topology_sign_and_scale_invariance(seed, scale):
    rng = np.random.default_rng(seed)
    mask = FeasibilityMask.full(4)
    Z = rng.normal(size=(4, 4))
    base = execution_topology(EdgeScores(Z, mask))
    np.testing.assert_array_equal(execution_topology(EdgeScores(scale * Z, mask)), base)
    np.testing.assert_array_equal(execution_topology(EdgeScores(np.sign(Z), mask)), base)


def test_posterior_mean_examples():
    mask = FeasibilityMask.full(3)
    W = posterior_mean(EdgeScores(np.zeros((3, 3)), mask)).weights
    assert np.all(W[mask.allowed] == 0.5) and np.all(np.diag(W) == 0)


def test_posterior_mean_matches_sampling():
    rng = np.random.default_rng(10)
    mask = FeasibilityMask.full(3)
    Z = rng.normal(size=(3, 3))
    _, hard = relax(Z, logistic_noise(rng, (100_000, 3, 3)), 0.5, mask)
    np.testing.assert_allclose(posterior_mean(EdgeScores(Z, mask)).weights, hard.mean(axis=0), atol=0.01)
