from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from src.core_model import Dataset
from src.errors import InvalidInputError
from src.outcome_sampler import (
    OutcomeState,
    beta_features,
    beta_vectors,
    collapsed_outcome,
    mediator_features,
    n_beta_terms,
    outcome_means,
    outcome_residuals,
    predict_outcome_mean,
    update_delta,
    update_gamma,
    update_sigma2,
    update_zeta,
)
from src.rng import stream

from .helpers import simple_spec

N_DRAWS = 10000


@pytest.fixture
def augmented(small_dataset):
    return np.random.default_rng(7).normal(size=(small_dataset.n, small_dataset.m))


@pytest.fixture
def outcome():
    return OutcomeState(
        delta=np.array([0.1, 0.4, -0.2, 0.3]), gamma=np.array([0.5]), zeta=np.array([0.2, -0.1, 0.3]), sigma2=0.6
    )


def test_outcome_state_validation():
    with pytest.raises(InvalidInputError):
        OutcomeState(np.zeros(2), np.zeros(1), np.zeros(3), 0.0)
    with pytest.raises(InvalidInputError):
        OutcomeState(np.array([np.nan, 0.0]), np.zeros(1), np.zeros(3), 1.0)


def test_beta_features_forms():
    assert n_beta_terms("linear") == 3
    assert n_beta_terms("quadratic") == 5
    np.testing.assert_allclose(beta_features(2.0, 3.0), [1.0, 2.0, 3.0])
    np.testing.assert_allclose(beta_features(2.0, 3.0, "quadratic"), [1.0, 2.0, 3.0, 4.0, 9.0])


def test_beta_vectors_shape():
    grid = np.array([-1.0, 0.0, 1.0])
    beta = beta_vectors(np.array([1.0, 0.5, 2.0]), np.array([0.0, 1.0]), grid)
    np.testing.assert_allclose(beta, [[-1.0, 1.0, 3.0], [-0.5, 1.5, 3.5]])


def test_mediator_features_match_loop(small_dataset, augmented):
    w = mediator_features(augmented, small_dataset, "quadratic")
    for i in range(small_dataset.n):
        expected = sum(
            augmented[i, m] * beta_features(small_dataset.t_obs[i], small_dataset.grid[m], "quadratic")
            for m in range(small_dataset.m)
        )
        np.testing.assert_allclose(w[i], expected)


def test_collapsed_outcome_removes_lambda_and_covariates(small_dataset, augmented, outcome):
    spec = simple_spec(small_dataset.t_obs)
    beta, y_tilde = collapsed_outcome(outcome, small_dataset, spec)
    resid = outcome_residuals(outcome, small_dataset, augmented, spec)
    np.testing.assert_allclose(y_tilde - np.einsum("im,im->i", beta, augmented), resid)


def test_update_delta_matches_conjugate_posterior(small_dataset, augmented, outcome):
    spec = simple_spec(small_dataset.t_obs, delta_var=2.0)
    design = spec.lambda_basis.design(small_dataset.t_obs)
    target = (
        small_dataset.y
        - small_dataset.x @ outcome.gamma
        - mediator_features(augmented, small_dataset) @ outcome.zeta
    )
    precision = design.T @ design / outcome.sigma2 + np.eye(design.shape[1]) / 2.0
    cov = np.linalg.inv(precision)
    mean = cov @ design.T @ target / outcome.sigma2

    draws = np.array([update_delta(outcome, small_dataset, augmented, spec, stream(21, k)) for k in range(N_DRAWS)])
    assert np.all(np.abs(draws.mean(axis=0) - mean) < 3 * np.sqrt(np.diag(cov) / N_DRAWS))
    np.testing.assert_allclose(np.cov(draws.T), cov, rtol=0.05, atol=0.05 * np.max(np.diag(cov)))


def test_update_zeta_matches_conjugate_posterior(small_dataset, augmented, outcome):
    spec = simple_spec(small_dataset.t_obs, zeta_var=3.0)
    w = mediator_features(augmented, small_dataset)
    target = (
        small_dataset.y
        - spec.lambda_basis.design(small_dataset.t_obs) @ outcome.delta
        - small_dataset.x @ outcome.gamma
    )
    precision = w.T @ w / outcome.sigma2 + np.eye(3) / 3.0
    cov = np.linalg.inv(precision)
    mean = cov @ w.T @ target / outcome.sigma2

    draws = np.array([update_zeta(outcome, small_dataset, augmented, spec, stream(22, k)) for k in range(N_DRAWS)])
    assert np.all(np.abs(draws.mean(axis=0) - mean) < 3 * np.sqrt(np.diag(cov) / N_DRAWS))
    np.testing.assert_allclose(np.cov(draws.T), cov, rtol=0.05, atol=0.05 * np.max(np.diag(cov)))


def test_update_gamma_mean(small_dataset, augmented, outcome):
    spec = simple_spec(small_dataset.t_obs, gamma_var=5.0)
    x = small_dataset.x
    target = (
        small_dataset.y
        - spec.lambda_basis.design(small_dataset.t_obs) @ outcome.delta
        - mediator_features(augmented, small_dataset) @ outcome.zeta
    )
    var = 1.0 / (x[:, 0] @ x[:, 0] / outcome.sigma2 + 1.0 / 5.0)
    mean = var * (x[:, 0] @ target) / outcome.sigma2

    draws = np.array([update_gamma(outcome, small_dataset, augmented, spec, stream(23, k))[0] for k in range(N_DRAWS)])
    assert abs(draws.mean() - mean) < 3 * np.sqrt(var / N_DRAWS)


def test_update_gamma_without_covariates(small_dataset, augmented):
    data = Dataset(
        y=small_dataset.y, s_obs=small_dataset.s_obs, t_obs=small_dataset.t_obs,
        x=np.zeros((small_dataset.n, 0)), grid=small_dataset.grid,
    )
    spec = simple_spec(data.t_obs)
    state = OutcomeState(np.zeros(spec.lambda_basis.n_coef), np.zeros(0), np.zeros(3), 1.0)
    assert update_gamma(state, data, augmented, spec, stream(24, 0)).shape == (0,)


def test_update_sigma2_matches_inverse_gamma(small_dataset, augmented, outcome):
    spec = simple_spec(small_dataset.t_obs, sigma2_a=3.0, sigma2_b=2.0)
    resid = outcome_residuals(outcome, small_dataset, augmented, spec)
    expected = stats.invgamma(3.0 + 0.5 * small_dataset.n, scale=2.0 + 0.5 * resid @ resid)

    draws = np.array([update_sigma2(outcome, small_dataset, augmented, spec, stream(25, k)) for k in range(N_DRAWS)])
    assert abs(draws.mean() - expected.mean()) < 3 * expected.std() / np.sqrt(N_DRAWS)


def test_updates_reject_wrong_augmentation(small_dataset, outcome):
    spec = simple_spec(small_dataset.t_obs)
    with pytest.raises(InvalidInputError):
        update_delta(outcome, small_dataset, np.zeros((2, 2)), spec, stream(26, 0))


def test_predict_outcome_mean(small_dataset, outcome):
    spec = simple_spec(small_dataset.t_obs)
    s = np.array([0.5, 1.0, -0.5])
    t = 0.3
    lam = spec.lambda_basis.design(np.array(t)) @ outcome.delta
    beta = [beta_features(t, g) @ outcome.zeta for g in small_dataset.grid]
    expected = lam + np.dot(beta, s) + 2.0 * 0.5
    assert predict_outcome_mean(t, s, [2.0], outcome, spec, small_dataset.grid) == pytest.approx(expected)
    with pytest.raises(InvalidInputError):
        predict_outcome_mean(t, s[:2], [2.0], outcome, spec, small_dataset.grid)


def test_outcome_means_match_single_predictions(small_dataset, augmented, outcome):
    spec = simple_spec(small_dataset.t_obs)
    t_query = np.array([-0.4, 0.1, 0.9])
    table = outcome_means(t_query, augmented, small_dataset.x, outcome, spec, small_dataset.grid)
    assert table.shape == (small_dataset.n, 3)
    for i in range(small_dataset.n):
        for k, t in enumerate(t_query):
            single = predict_outcome_mean(t, augmented[i], small_dataset.x[i], outcome, spec, small_dataset.grid)
            assert table[i, k] == pytest.approx(single)


@pytest.mark.slow
def test_outcome_block_joint_distribution(small_dataset, augmented):
    """Successive-conditional simulator: alternating y | params and params | y must leave the prior invariant"""
    spec = simple_spec(
        small_dataset.t_obs, delta_var=1.0, gamma_var=1.0, zeta_var=1.0, sigma2_a=3.0, sigma2_b=2.0
    )
    lam = spec.lambda_basis.design(small_dataset.t_obs)
    w = mediator_features(augmented, small_dataset)
    prior_rng = stream(27, 0)
    state = OutcomeState(
        prior_rng.standard_normal(lam.shape[1]),
        prior_rng.standard_normal(1),
        prior_rng.standard_normal(3),
        float(stats.invgamma.rvs(3.0, scale=2.0, random_state=prior_rng)),
    )

    n_iter = 20000
    trace = np.empty((n_iter, 3))
    for it in range(n_iter):
        rng = stream(27, 1, it)
        mean = lam @ state.delta + small_dataset.x @ state.gamma + w @ state.zeta
        y = mean + np.sqrt(state.sigma2) * rng.standard_normal(small_dataset.n)
        data = Dataset(y=y, s_obs=small_dataset.s_obs, t_obs=small_dataset.t_obs, x=small_dataset.x, grid=small_dataset.grid)
        state = replace(state, delta=update_delta(state, data, augmented, spec, stream(27, 2, it)))
        state = replace(state, gamma=update_gamma(state, data, augmented, spec, stream(27, 3, it)))
        state = replace(state, zeta=update_zeta(state, data, augmented, spec, stream(27, 4, it)))
        state = replace(state, sigma2=update_sigma2(state, data, augmented, spec, stream(27, 5, it)))
        trace[it] = state.delta[0], state.zeta[1], state.sigma2

    kept = trace[2000::5]
    assert abs(kept[:, 0].mean()) < 0.1
    assert abs(kept[:, 1].mean()) < 0.1
    assert kept[:, 0].var() == pytest.approx(1.0, abs=0.15)
    assert np.median(kept[:, 2]) == pytest.approx(stats.invgamma(3.0, scale=2.0).median(), abs=0.1)
