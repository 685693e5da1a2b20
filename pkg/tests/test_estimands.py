from dataclasses import replace

import numpy as np
import pytest

from src.config import Config
from src.core_model import Dataset, KernelParams, ModelSpec, kernel_cov
from src.errors import EmptyStratumError, InvalidInputError
from src.estimands import (
    _summarize,
    StratumSpec,
    cluster_phi_summary,
    dose_response_curve,
    g_avg_abs_deriv,
    g_mean,
    g_range,
    pce_curve,
    phi_curves,
    stratum_curve_draws,
    treatment_effect,
)
from src.gibbs_engine import PosteriorDraws

GRID = np.array([-1.0, -0.3, 0.4, 1.0])
MEAN_LEVEL = 0.3
# Flagged mediator row that sits inside every stratum used below
INSIDE_ROW = np.array([0.0, 2.0, 0.0, 0.5])


def known_draws(n: int = 50, aug_row=INSIDE_ROW):
    """One draw in which every unit has S ~ N(0.3, K) and Y(t) = sum_m S(t_m); aug_row may give one row per unit"""
    t_obs = np.random.default_rng(3).uniform(-1, 1, n)
    data = Dataset(y=np.zeros(n), s_obs=np.zeros(n), t_obs=t_obs, x=np.zeros((n, 1)), grid=GRID)
    config = Config(overrides={"model.truncation": 2}).to_dict()
    spec = ModelSpec.from_settings(config["model"], config["priors"], t_obs)
    draws = PosteriorDraws(
        rho=np.array([1.0]),
        sigma_s2=np.array([1.0]),
        alpha=np.array([[MEAN_LEVEL, 0.0]]),
        xi=np.zeros((1, 2, spec.basis.n_coef)),
        v=np.ones((1, 2)),
        pi=np.array([[1.0, 0.0]]),
        z=np.zeros((1, n), dtype=int),
        kappa=np.ones(1),
        delta=np.zeros((1, spec.lambda_basis.n_coef)),
        gamma=np.zeros((1, 1)),
        zeta=np.array([[1.0, 0.0, 0.0]]),
        sigma2=np.ones(1),
        aug=np.broadcast_to(aug_row, (n, len(GRID)))[None].copy(),
        rho_accepted=np.ones(1, dtype=bool),
        log_target=np.zeros(1),
        config=config,
        grid=GRID,
    )
    return data, draws


def test_g_functions():
    s = np.array([[0.0, 2.0, 1.0], [1.0, 1.0, 1.0]])
    np.testing.assert_allclose(g_range(s), [2.0, 0.0])
    np.testing.assert_allclose(g_mean(s), [1.0, 1.0])
    np.testing.assert_allclose(g_avg_abs_deriv(s), [3.0, 0.0])
    with pytest.raises(InvalidInputError):
        g_avg_abs_deriv(np.array([1.0]))


def test_stratum_spec_validation():
    with pytest.raises(InvalidInputError):
        StratumSpec("range", 2.0, 1.0)
    with pytest.raises(InvalidInputError):
        StratumSpec("median")
    with pytest.raises(InvalidInputError):
        StratumSpec("custom")
    custom = StratumSpec("custom", 0.0, np.inf, func=lambda s: s[..., -1])
    np.testing.assert_array_equal(custom.contains(np.array([[1.0, -1.0], [-1.0, 1.0]])), [False, True])


def test_stratum_bounds_are_strict():
    stratum = StratumSpec("mean", 0.0, 1.0)
    np.testing.assert_array_equal(stratum.contains(np.array([[0.0], [0.5], [1.0]])), [False, True, False])


@pytest.mark.parametrize(
    "stratum",
    [StratumSpec("range", 1.0, np.inf), StratumSpec("mean", 0.2, np.inf), StratumSpec("avg_abs_deriv", 1.5, np.inf)],
    ids=["range", "mean", "avg_abs_deriv"],
)
def test_pce_matches_population_oracle(stratum):
    data, draws = known_draws()
    n_mc = 400
    curve = pce_curve(draws, data, stratum, n_mc=n_mc, seed=5)

    chol = np.linalg.cholesky(kernel_cov(GRID, KernelParams(1.0, 1.0)) + 1e-10 * np.eye(len(GRID)))
    population = MEAN_LEVEL + np.random.default_rng(9).standard_normal((400_000, len(GRID))) @ chol.T
    inside = population[stratum.contains(population)]
    outcome = inside.sum(axis=1)
    fraction = len(inside) / len(population)

    # Bayesian-bootstrap weighting roughly doubles the Monte Carlo variance
    se = outcome.std() * np.sqrt(2.0 / (data.n * n_mc * fraction) + 1.0 / len(inside))
    np.testing.assert_allclose(curve.mean, outcome.mean(), atol=4 * se)
    np.testing.assert_allclose(curve.mean, curve.mean[0])


def test_nested_stratum_mixes_its_parts():
    chol = np.linalg.cholesky(kernel_cov(GRID, KernelParams(1.0, 1.0)) + 1e-10 * np.eye(len(GRID)))
    rows = MEAN_LEVEL + np.random.default_rng(14).standard_normal((200, len(GRID))) @ chol.T
    data, draws = known_draws(n=200, aug_row=rows)

    # g = mean is symmetric about 0.3, so each half holds half of the outer stratum
    lower, upper, whole = (
        pce_curve(draws, data, StratumSpec("mean", a, b), n_mc=400, seed=5).mean
        for a, b in [(-0.5, MEAN_LEVEL), (MEAN_LEVEL, 1.1), (-0.5, 1.1)]
    )
    assert np.all(lower < whole) and np.all(whole < upper)
    np.testing.assert_allclose((upper - whole) / (upper - lower), 0.5, atol=0.05)


def test_no_mediator_effect_gives_one_curve_for_every_stratum():
    data, draws = known_draws()
    delta = np.linspace(-0.5, 0.5, draws.delta.shape[1])
    draws = replace(draws, zeta=np.zeros((1, 3)), delta=delta[None])
    expected = draws.model_spec(data).lambda_basis.design(GRID) @ delta

    for stratum in [StratumSpec("range", 1.0, np.inf), StratumSpec("mean", 0.2, np.inf), StratumSpec("avg_abs_deriv", 1.5, np.inf)]:
        curve = pce_curve(draws, data, stratum, n_mc=50, seed=5)
        np.testing.assert_allclose(curve.mean, expected, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(dose_response_curve(draws, data, n_mc=50, seed=5).mean, expected, rtol=1e-12, atol=1e-12)


def test_vacuous_stratum_equals_dose_response(tiny_draws):
    data, draws = tiny_draws
    vacuous = pce_curve(draws, data, StratumSpec("range"), n_mc=15, seed=2)
    overall = dose_response_curve(draws, data, n_mc=15, seed=2)
    np.testing.assert_allclose(vacuous.values, overall.values, rtol=1e-12)
    np.testing.assert_allclose(vacuous.stratum_fraction, 1.0)


def test_curve_is_reproducible(tiny_draws):
    data, draws = tiny_draws
    stratum = StratumSpec("mean", float(np.mean(data.s_obs)), np.inf)
    first = pce_curve(draws, data, stratum, n_mc=10, seed=4)
    second = pce_curve(draws, data, stratum, n_mc=10, seed=4)
    np.testing.assert_array_equal(first.values, second.values)
    frame = first.to_frame()
    assert list(frame.columns) == ["t", "mean", "lo95", "hi95", "avg_stratum_fraction"]
    assert np.all(frame["lo95"] <= frame["hi95"])


def test_effect_is_difference_of_curve_draws(tiny_draws):
    data, draws = tiny_draws
    stratum = StratumSpec("range", -np.inf, np.inf)
    effect = treatment_effect(draws, data, stratum, 0.5, -0.5, n_mc=10, seed=8)
    curve = pce_curve(draws, data, stratum, t_query=[0.5, -0.5], n_mc=10, seed=8)
    np.testing.assert_allclose(effect.values, curve.values[:, 0] - curve.values[:, 1])
    assert effect.lower <= effect.mean <= effect.upper


def test_interval_reaches_a_skewed_mean():
    values = np.zeros((100, 1))
    values[-1] = 1000.0
    curve = _summarize(np.array([0.0]), values, np.ones(100), 0, 0.95, "skewed")
    assert curve.mean[0] == pytest.approx(10.0)
    assert curve.lower[0] == 0.0
    assert curve.upper[0] == pytest.approx(10.0)


def test_empty_stratum_raises(tiny_draws):
    data, draws = tiny_draws
    with pytest.raises(EmptyStratumError):
        pce_curve(draws, data, StratumSpec("range", 1e6, np.inf), n_mc=5)


def test_unreachable_stratum_escalates_then_drops_units():
    # Units are flagged by their imputed row, but fresh trajectories almost never reach mean 3
    data, draws = known_draws(n=10, aug_row=np.full(4, 4.0))
    values, fraction, unresolved = stratum_curve_draws(
        draws, data, StratumSpec("mean", 3.0, np.inf), GRID, n_mc=5, seed=1, escalation=5
    )
    np.testing.assert_allclose(fraction, 1.0)
    assert unresolved == data.n
    assert np.all(np.isnan(values))


def test_argument_checks(tiny_draws):
    data, draws = tiny_draws
    with pytest.raises(InvalidInputError):
        pce_curve(draws, data, StratumSpec(), membership="bogus")
    with pytest.raises(InvalidInputError):
        pce_curve(draws, data, StratumSpec(), n_mc=0)


def test_mixture_membership_runs(tiny_draws):
    data, draws = tiny_draws
    curve = pce_curve(draws, data, StratumSpec(), n_mc=10, membership="mixture")
    assert np.all(np.isfinite(curve.mean))


def test_phi_summaries(tiny_draws, simulated):
    data, draws = tiny_draws
    _, truth = simulated
    phi = phi_curves(draws, data)
    assert phi.shape == (data.n, data.m)
    summary = cluster_phi_summary(phi, truth.cluster, data.grid)
    assert set(summary.index) <= {0, 1, 2}
    assert summary.shape[1] == data.m
