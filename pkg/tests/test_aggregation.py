import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmvmlab import autodiff as ad
from mmvmlab.aggregation import (
    STRATEGIES,
    aggregate,
    aggregate_avg,
    aggregate_moe,
    aggregate_mopoe,
    aggregate_poe,
    check_strategy,
    mmvm_prior,
    modality_subsets,
)
from mmvmlab.distributions import (
    DiagonalGaussian,
    RngStream,
    draw_noise,
    gaussian_log_prob,
    js_divergence,
    kl_to_mixture,
    mixture_log_prob,
    product_of_gaussians,
)
from mmvmlab.errors import ConfigError, ContractViolation


def g1(mu, sd):
    return DiagonalGaussian(np.array([float(mu)]), np.array([float(sd)]))


def random_bundle(gen, M, d, batch=()):
    return [DiagonalGaussian(gen.uniform(-3, 3, (*batch, d)), gen.uniform(0.3, 2, (*batch, d))) for _ in range(M)]


def close(a, b, tol=1e-12):
    np.testing.assert_allclose(a.mean.value, b.mean.value, rtol=0, atol=tol)
    np.testing.assert_allclose(a.stddev.value, b.stddev.value, rtol=0, atol=tol)


def test_strategy_tags():
    assert set(STRATEGIES) == {"independent", "avg", "moe", "poe", "mopoe", "mmvm"}
    with pytest.raises(ConfigError):
        check_strategy("vamp")


@pytest.mark.parametrize("fn", [aggregate_avg, aggregate_poe, aggregate_moe, aggregate_mopoe, mmvm_prior])
def test_empty_bundle_rejected(fn):
    with pytest.raises(ContractViolation):
        fn([])


def test_mismatched_dims_rejected():
    with pytest.raises(ContractViolation):
        aggregate_avg([g1(0, 1), DiagonalGaussian(np.zeros(2), np.ones(2))])


# ---------------------------------------------------------------------------
# AVG


def test_avg_single_is_identity():
    g = g1(0.5, 2)
    close(aggregate_avg([g]), g)


def test_avg_of_stddevs_not_variances():
    a = aggregate_avg([g1(0, 1), g1(2, 3)])
    assert float(a.mean.value[0]) == 1.0
    assert float(a.stddev.value[0]) == 2.0


@given(st.permutations(range(3)), st.integers(0, 1000))
def test_aggregations_permutation_invariant(perm, seed):
    bundle = random_bundle(np.random.default_rng(seed), 3, 2)
    shuffled = [bundle[i] for i in perm]
    close(aggregate_avg(bundle), aggregate_avg(shuffled))
    close(aggregate_poe(bundle), aggregate_poe(shuffled), 1e-12)
    z = np.array([0.3, -0.2])
    for fn in (aggregate_moe, aggregate_mopoe, mmvm_prior):
        assert float(mixture_log_prob(fn(bundle), z).value) == pytest.approx(
            float(mixture_log_prob(fn(shuffled), z).value), abs=1e-12)


# ---------------------------------------------------------------------------
# PoE


def test_poe_single_without_prior_is_identity():
    g = g1(0.5, 2)
    close(aggregate_poe([g], include_prior_expert=False), g)


def test_poe_two_standard_normals_without_prior():
    p = aggregate_poe([g1(0, 1), g1(0, 1)], include_prior_expert=False)
    assert float(p.stddev.value[0]) ** 2 == pytest.approx(0.5, abs=1e-15)


def test_poe_two_standard_normals_with_prior():
    p = aggregate_poe([g1(0, 1), g1(0, 1)])
    assert float(p.stddev.value[0]) ** 2 == pytest.approx(1 / 3, abs=1e-15)


@given(st.integers(1, 5), st.integers(0, 1000), st.booleans())
def test_poe_variance_below_smallest_input(M, seed, prior):
    bundle = random_bundle(np.random.default_rng(seed), M, 3)
    p = aggregate_poe(bundle, include_prior_expert=prior)
    smallest = np.min([q.stddev.value for q in bundle], axis=0)
    assert np.all(p.stddev.value <= smallest + 1e-12)


# ---------------------------------------------------------------------------
# MoE / MoPoE / MMVM prior


def test_moe_single_component():
    g = g1(0.5, 2)
    mix = aggregate_moe([g])
    assert len(mix) == 1 and mix.components[0] is g and list(mix.weights) == [1.0]


def test_moe_uniform_weights_and_direct_density():
    gen = np.random.default_rng(0)
    bundle = random_bundle(gen, 4, 2)
    mix = aggregate_moe(bundle)
    np.testing.assert_array_equal(mix.weights, [0.25] * 4)
    z = gen.normal(size=2)
    direct = math.log(np.mean([math.exp(float(gaussian_log_prob(q, z).value)) for q in bundle]))
    assert float(mixture_log_prob(mix, z).value) == pytest.approx(direct, abs=1e-12)


def test_mopoe_single_modality():
    g = g1(0.5, 2)
    mix = aggregate_mopoe([g])
    assert len(mix) == 1
    close(mix.components[0], g)


def test_mopoe_two_modalities():
    q1, q2 = g1(0, 1), g1(2, 0.5)
    mix = aggregate_mopoe([q1, q2])
    assert len(mix) == 3
    close(mix.components[0], q1)
    close(mix.components[1], q2)
    close(mix.components[2], product_of_gaussians([q1, q2]))


@pytest.mark.parametrize("M", range(1, 7))
def test_mopoe_component_count(M):
    assert len(modality_subsets(M)) == 2 ** M - 1
    assert len(aggregate_mopoe(random_bundle(np.random.default_rng(M), M, 1))) == 2 ** M - 1


def test_mopoe_refuses_large_m():
    with pytest.raises(ContractViolation, match="2\\^M"):
        aggregate_mopoe([g1(0, 1)] * 11)


def test_mmvm_prior_single_gives_zero_rate():
    q = g1(0.3, 0.7)
    assert float(kl_to_mixture(q, mmvm_prior([q]), 50, RngStream(0)).value) == 0.0


def test_mmvm_prior_identical_posteriors_zero_rate():
    q = g1(0.3, 0.7)
    mix = mmvm_prior([q, q, q])
    rate = sum(float(kl_to_mixture(q, mix, 100, RngStream(m)).value) for m in range(3))
    assert abs(rate) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_rate_equals_m_times_js_with_shared_samples(seed):
    gen = np.random.default_rng(seed)
    bundle = random_bundle(gen, 3, 2, batch=(4,))
    noise = draw_noise(bundle, 8, RngStream(seed))
    mix = mmvm_prior(bundle)
    rate = sum(kl_to_mixture(q, mix, eps=e).value for q, e in zip(bundle, noise))
    js = js_divergence(bundle, eps=noise).value
    np.testing.assert_allclose(rate, 3 * js, rtol=0, atol=1e-12)


def test_rate_identity_within_mc_tolerance_for_independent_samples():
    bundle = [g1(0, 1), g1(2, 0.7), g1(-1, 1.5)]
    mix = mmvm_prior(bundle)
    rate = sum(float(kl_to_mixture(q, mix, 50_000, RngStream(1).split(m)).value) for m, q in enumerate(bundle))
    js = float(js_divergence(bundle, 50_000, RngStream(2)).value)
    assert rate == pytest.approx(3 * js, rel=0.02)


def test_aggregate_dispatch():
    bundle = [g1(0, 1), g1(1, 1)]
    assert aggregate("independent", bundle).joint is None
    assert isinstance(aggregate("avg", bundle).joint, DiagonalGaussian)
    assert isinstance(aggregate("poe", bundle).joint, DiagonalGaussian)
    assert len(aggregate("moe", bundle).joint) == 2
    assert len(aggregate("mopoe", bundle).joint) == 3
    assert len(aggregate("mmvm", bundle).joint) == 2


def test_aggregation_is_differentiable():
    m1 = ad.Node(np.array([0.2]), name="m1")
    s1 = ad.Node(np.array([0.9]), name="s1")
    q = DiagonalGaussian(m1, s1)
    out = ad.sum(ad.add(aggregate_avg([q, g1(1, 1)]).stddev, aggregate_poe([q, g1(1, 1)]).mean))
    assert set(ad.backward(out)) == {"m1", "s1"}
