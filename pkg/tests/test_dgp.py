import numpy as np
import pytest

from fedcausal import (
    DimensionMismatch,
    OutcomeSpec,
    RngHandle,
    gen_dgp_a,
    gen_dgp_b,
    logistic,
    true_ate,
    validate_federation,
)
from fedcausal.dgp import (
    COVARIATE_DIM,
    DgpAParams,
    DgpBParams,
    MEMBERSHIP_COEFS,
    benchmark_outcome_spec,
    dgp_a_params,
    dgp_b_params,
    oracle_local_propensities,
    oracle_membership_weights_fn,
    softmax_rows,
)
from conftest import TRUE_ATE_A, TRUE_ATE_A_SE, TRUE_ATE_B, TRUE_ATE_B_SE


# -- logistic ------------------------------------------------------------------


def test_logistic_is_half_at_zero_score():
    x = np.array([[1.0, -2.0, 1.0]])
    gamma = np.array([2.0, 1.0, 0.0])  # inner product 0
    assert logistic(x, gamma)[0] == pytest.approx(0.5, abs=0)


def test_logistic_zero_coefficients_give_half_everywhere():
    x = np.random.default_rng(0).normal(size=(50, 4))
    np.testing.assert_array_equal(logistic(x, np.zeros(4)), np.full(50, 0.5))


def test_logistic_monotone_to_one():
    gamma = np.ones(2)
    scores = logistic(np.array([[1.0, 1.0], [5.0, 5.0], [500.0, 500.0]]), gamma)
    assert np.all(np.diff(scores) >= 0)
    assert scores[-1] == pytest.approx(1.0)


def test_logistic_rejects_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        logistic(np.ones((3, 4)), np.ones(5))


# -- design A ------------------------------------------------------------------


def test_dgp_a_no_overlap_regime_leaves_site2_untreated():
    fd = gen_dgp_a(dgp_a_params("none", site_size=500), benchmark_outcome_spec(),
                   RngHandle(11, 0))
    assert fd.sites[1].w.sum() == 0
    assert fd.sites[0].w.sum() > 0
    assert fd.sites[2].w.sum() > 0


@pytest.mark.parametrize("regime", ["poor", "good"])
def test_dgp_a_other_regimes_treat_some_site2_rows(regime):
    fd = gen_dgp_a(dgp_a_params(regime), benchmark_outcome_spec(), RngHandle(12, 0))
    assert fd.sites[1].w.sum() > 0


def _toy_spec():
    return OutcomeSpec(lambda x: x[:, 0] + 1.0, lambda x: x[:, 0], noise_sd=1.0)


def test_dgp_a_standard_normal_site_obeys_law_of_large_numbers():
    # direct-sampling check: mean of N(0, I) coordinates within 4 standard errors
    n = 100_000
    params = DgpAParams(
        site_means=(np.zeros(3),),
        site_covs=(np.eye(3),),
        site_sizes=(n,),
        treatment_coefs=(np.zeros(3),),
    )
    fd = gen_dgp_a(params, _toy_spec(), RngHandle(13, 0))
    se = 1.0 / np.sqrt(n)
    assert np.abs(fd.sites[0].x.mean(axis=0)).max() < 4 * se


def test_dgp_a_noiseless_outcomes_equal_treated_surface_exactly():
    spec = benchmark_outcome_spec(noise_sd=0.0)
    # mean 5 keeps the coordinate sum strictly positive, so the huge
    # coefficients saturate every score at 1
    params = DgpAParams(
        site_means=(np.full(COVARIATE_DIM, 5.0),),
        site_covs=(np.eye(COVARIATE_DIM),),
        site_sizes=(200,),
        treatment_coefs=(np.full(COVARIATE_DIM, 1e6),),
    )
    fd = gen_dgp_a(params, spec, RngHandle(14, 0))
    site = fd.sites[0]
    assert site.w.sum() == site.n
    np.testing.assert_array_equal(site.y, spec.treated_mean(site.x))


def test_generated_federations_validate():
    spec = benchmark_outcome_spec()
    for regime in ("none", "poor", "good"):
        validate_federation(
            gen_dgp_a(dgp_a_params(regime, site_size=200), spec, RngHandle(15, 1))
        )
        validate_federation(
            gen_dgp_b(dgp_b_params(regime, n_total=900), spec, RngHandle(15, 2))
        )


def test_generation_is_deterministic_per_stream():
    spec = benchmark_outcome_spec()
    a = gen_dgp_a(dgp_a_params("good", site_size=100), spec, RngHandle(16, 3))
    b = gen_dgp_a(dgp_a_params("good", site_size=100), spec, RngHandle(16, 3))
    for s1, s2 in zip(a.sites, b.sites):
        np.testing.assert_array_equal(s1.x, s2.x)
        np.testing.assert_array_equal(s1.w, s2.w)
        np.testing.assert_array_equal(s1.y, s2.y)
    c = gen_dgp_a(dgp_a_params("good", site_size=100), spec, RngHandle(16, 4))
    assert not np.array_equal(a.sites[0].x, c.sites[0].x)


# -- design B ------------------------------------------------------------------


def test_dgp_b_symmetric_membership_gives_equal_site_shares():
    n = 100_000
    params = DgpBParams(
        n_total=n,
        mixture_weights=(1.0,),
        component_means=(np.zeros(4),),
        component_covs=(np.eye(4),),
        membership_coefs=np.tile(np.array([[0.3], [0.1], [-0.2], [0.0]]), (1, 3)),
        treatment_coefs=(np.zeros(4),) * 3,
    )
    fd = gen_dgp_b(params, _toy_spec(), RngHandle(17, 0))
    shares = np.array([s.n for s in fd.sites]) / n
    se = np.sqrt((1 / 3) * (2 / 3) / n)
    assert np.abs(shares - 1 / 3).max() < 4 * se


def test_dgp_b_assignment_frequencies_match_softmax_probabilities():
    # Monte Carlo of the assignment rule: bin rows by their predicted
    # membership probability and compare against empirical frequencies.
    n = 100_000
    params = dgp_b_params("good", n_total=n)
    fd = gen_dgp_b(params, benchmark_outcome_spec(), RngHandle(18, 0))
    x = np.vstack([s.x for s in fd.sites])
    h = np.repeat(np.arange(3), [s.n for s in fd.sites])
    probs = softmax_rows(x @ MEMBERSHIP_COEFS)
    for k in range(3):
        p_k = probs[:, k]
        bins = np.quantile(p_k, np.linspace(0, 1, 11))
        idx = np.clip(np.searchsorted(bins, p_k, side="right") - 1, 0, 9)
        for b in range(10):
            mask = idx == b
            m = int(mask.sum())
            if m < 200:
                continue
            expected = p_k[mask].mean()
            se = np.sqrt(max(expected * (1 - expected), 1e-12) / m)
            assert abs((h[mask] == k).mean() - expected) < 4 * se + 1e-12


def test_dgp_b_degenerate_mixture_draws_single_component():
    n = 50_000
    params = DgpBParams(
        n_total=n,
        mixture_weights=(1.0, 0.0),
        component_means=(np.full(3, 2.0), np.zeros(3)),
        component_covs=(np.eye(3), np.eye(3)),
        membership_coefs=np.zeros((3, 2)),
        treatment_coefs=(np.zeros(3),) * 2,
    )
    fd = gen_dgp_b(params, _toy_spec(), RngHandle(19, 0))
    x = np.vstack([s.x for s in fd.sites])
    se = 1.0 / np.sqrt(n)
    assert np.abs(x.mean(axis=0) - 2.0).max() < 4 * se


# -- ground-truth oracle ---------------------------------------------------------


def test_true_ate_identical_arms_is_exactly_zero():
    spec = OutcomeSpec(lambda x: x[:, 0] ** 2, lambda x: x[:, 0] ** 2, 1.0)
    sampler = lambda n, rng: rng.normal(size=(n, 2))
    result = true_ate(spec, sampler, 20_000, RngHandle(20, 0))
    assert result.value == 0.0
    assert result.se == 0.0


def test_true_ate_constant_difference_has_zero_se():
    spec = OutcomeSpec(lambda x: x[:, 0] + 3.0, lambda x: x[:, 0], 1.0)
    sampler = lambda n, rng: rng.normal(size=(n, 1))
    result = true_ate(spec, sampler, 20_000, RngHandle(21, 0))
    assert result.value == pytest.approx(3.0, abs=1e-12)
    assert result.se == pytest.approx(0.0, abs=1e-12)


def _analytic_effect(mean_consts, diag_vars, cross_covs, weights):
    """Independent closed-form value of the benchmark effect surface.

    The treated-minus-control surface reduces to (1/3) * sum of the first
    five squared coordinates plus (1/3) * sum of the last five coordinates
    plus the difference of two products of coordinates that share identical
    moments under the exchangeable designs here, so the products cancel.
    """
    total = 0.0
    for w, mu, var in zip(weights, mean_consts, diag_vars):
        e_x2 = var + mu**2
        total += w * (5 * e_x2 / 3 + 5 * mu / 3)
    assert len(cross_covs) == len(weights)  # cross terms cancel by symmetry
    return total


def test_frozen_design_a_effect_matches_analytic_moments():
    # site marginals: N(1, I+0.5J), N(1.5, 0.6I+0.4J), N(3, 3I+0.3J)
    analytic = _analytic_effect(
        mean_consts=(1.0, 1.5, 3.0),
        diag_vars=(1.5, 1.0, 3.3),
        cross_covs=(0.5, 0.4, 0.3),
        weights=(1 / 3, 1 / 3, 1 / 3),
    )
    assert analytic == pytest.approx(117.75 / 9)
    assert abs(TRUE_ATE_A - analytic) < 4 * TRUE_ATE_A_SE


def test_frozen_design_b_effect_matches_analytic_moments():
    analytic = _analytic_effect(
        mean_consts=(0.0, 1.5),
        diag_vars=(1.0, 1.5),
        cross_covs=(0.0, 0.5),
        weights=(2 / 3, 1 / 3),
    )
    assert analytic == pytest.approx(145 / 36)
    assert abs(TRUE_ATE_B - analytic) < 4 * TRUE_ATE_B_SE


def test_oracle_recomputation_agrees_with_frozen_values():
    spec = benchmark_outcome_spec()
    redo = true_ate(
        spec, dgp_a_params("good").sample_marginal_covariates, 200_000, RngHandle(22, 0)
    )
    combined_se = np.hypot(redo.se, TRUE_ATE_A_SE)
    assert abs(redo.value - TRUE_ATE_A) < 4 * combined_se


def test_oracle_propensity_decomposition_matches_simulated_treatment_rate():
    # law of total probability: sum_k P(site=k | x) e_k(x) equals the
    # simulated treatment frequency at fixed points (design B truth).
    params = dgp_b_params("good")
    weights_fn = oracle_membership_weights_fn(params)
    locals_ = oracle_local_propensities(params)
    rng = np.random.default_rng(23)
    x = params.sample_marginal_covariates(40, rng)
    w = weights_fn(x)
    scores = np.column_stack([f(x) for f in locals_])
    predicted = (w * scores).sum(axis=1)

    m = 40_000
    u_site = rng.random((len(x), m))
    cum = w.cumsum(axis=1)
    site_draws = (cum[:, :, None] > u_site[:, None, :]).argmax(axis=1)
    e_draws = np.take_along_axis(scores, site_draws, axis=1)
    treated = rng.random((len(x), m)) < e_draws
    freq = treated.mean(axis=1)
    se = np.sqrt(predicted * (1 - predicted) / m)
    assert np.all(np.abs(freq - predicted) < 4 * se + 1e-9)
