"""Marginal posterior of the GP length-scale rho and its large-sample behavior"""

import logging
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy import linalg

from .core_model import Dataset, ModelSpec
from .mediator_sampler import MediatorState, collapsed_log_target, rho_log_target_arrays
from .outcome_sampler import OutcomeState
from .simgen import GroundTruth, Scenario, generate

logger = logging.getLogger(__name__)

DEFAULT_RHO_GRID = np.round(np.arange(0.5, 10.01, 0.1), 10)


def log_marginal_rho(rho: float, data: Dataset, mediator: MediatorState, outcome: OutcomeState, spec: ModelSpec) -> float:
    """log P(rho | D) up to a constant, with the potential mediators integrated out"""
    return collapsed_log_target(rho, data, mediator, outcome, spec)


def log_marginal_unit_matrix_form(
    beta: np.ndarray, mu_tilde: np.ndarray, sigma_tilde: np.ndarray, y_tilde: float, sigma2: float
) -> float:
    """
    One unit's contribution written with Sigma~^-1 and the rank-one determinant:

    -1/2 log(1 + b'Sb/s2) - 1/2 [mu' S^-1 mu - q' (bb'/s2 + S^-1)^-1 q], q = y b/s2 + S^-1 mu
    """
    factor = linalg.cho_factor(sigma_tilde, lower=True)
    inv_mu = linalg.cho_solve(factor, mu_tilde)
    precision = np.outer(beta, beta) / sigma2 + linalg.cho_solve(factor, np.eye(len(beta)))
    q = y_tilde * beta / sigma2 + inv_mu
    quad = mu_tilde @ inv_mu - q @ np.linalg.solve(precision, q)
    return float(-0.5 * np.log1p(beta @ sigma_tilde @ beta / sigma2) - 0.5 * quad)


def truth_log_marginal(rho: float, data: Dataset, truth: GroundTruth, include_prior: bool = False, prior=(2.0, 0.5)) -> float:
    """Log marginal of rho with every other parameter at its generating value (beta as the linear model fits it)"""
    return rho_log_target_arrays(
        rho,
        truth.scenario.sigma_s2,
        data,
        truth.m_grid,
        truth.m_obs,
        truth.beta_fit,
        truth.y_tilde,
        truth.scenario.sigma2,
        prior=prior if include_prior else None,
    )


def rho_grid_scan(
    rho_values: Sequence[float], data: Dataset, mediator: MediatorState, outcome: OutcomeState, spec: ModelSpec
) -> pd.DataFrame:
    """Columns rho, log_density over the supplied values"""
    rho_values = np.asarray(rho_values, dtype=float)
    dens = [log_marginal_rho(r, data, mediator, outcome, spec) for r in rho_values]
    return pd.DataFrame({"rho": rho_values, "log_density": dens})


def truth_grid_scan(rho_values: Sequence[float], data: Dataset, truth: GroundTruth, include_prior: bool = True) -> pd.DataFrame:
    rho_values = np.asarray(rho_values, dtype=float)
    dens = [truth_log_marginal(r, data, truth, include_prior) for r in rho_values]
    return pd.DataFrame({"rho": rho_values, "log_density": dens})


def scaled_derivative(data: Dataset, truth: GroundTruth, rho_star: float, include_prior: bool = False) -> float:
    """Central difference of the log marginal at rho_star with step 1e-3 rho_star, divided by n"""
    h = 1e-3 * rho_star
    up = truth_log_marginal(rho_star + h, data, truth, include_prior)
    down = truth_log_marginal(rho_star - h, data, truth, include_prior)
    return (up - down) / (2 * h) / data.n


def derivative_check(
    n_values: Sequence[int],
    rho_star: float = 3.0,
    c: float = 0.25,
    seed: int = 1,
    misspecified: bool = False,
    beta_mode: Optional[str] = None,
    include_prior: bool = False,
) -> pd.DataFrame:
    """
    Per-observation derivative of the log marginal at the true rho for growing n.

    Columns n, derivative, abs_derivative, argmax (grid maximizer of the same log marginal).
    beta_i = c 1_M by default; a misspecified run uses the quadratic surface truth and
    evaluates the marginal with its linear projection.
    """
    if beta_mode is None:
        beta_mode = "surface" if misspecified else "constant"
    rows = []
    for n in n_values:
        scenario = Scenario(
            n=int(n), rho_star=rho_star, c=c, seed=seed, misspecified=misspecified, beta_mode=beta_mode
        )
        data, truth = generate(scenario)
        deriv = scaled_derivative(data, truth, rho_star, include_prior)
        scan = truth_grid_scan(DEFAULT_RHO_GRID, data, truth, include_prior)
        rows.append(
            {
                "n": int(n),
                "derivative": deriv,
                "abs_derivative": abs(deriv),
                "argmax": float(scan["rho"].iloc[int(np.argmax(scan["log_density"].to_numpy()))]),
            }
        )
        logger.debug("n=%d derivative %.3g", n, deriv)
    return pd.DataFrame(rows)


def _normalized(log_density: np.ndarray) -> np.ndarray:
    weights = np.exp(log_density - np.max(log_density))
    return weights / weights.sum()


def _interquartile_width(rho_values: np.ndarray, weights: np.ndarray) -> float:
    cdf = np.cumsum(weights)
    lo = np.interp(0.25, cdf, rho_values)
    hi = np.interp(0.75, cdf, rho_values)
    return float(hi - lo)


def rho_posterior_study(
    n: int = 500,
    rho_star: float = 3.0,
    c_values: Sequence[float] = (0.05, 0.15, 0.25),
    n_reps: int = 100,
    rho_values: Optional[Sequence[float]] = None,
    seed: int = 1,
):
    """
    Averaged marginal posterior of rho over replicated datasets with beta_i = c 1_M.

    Returns (curves, summary): curves has rho, c, log_density (mean over replicates) and
    posterior (normalized); summary has c, argmax, iqr_width per c.
    """
    rho_values = DEFAULT_RHO_GRID if rho_values is None else np.asarray(rho_values, dtype=float)
    curves, summary = [], []
    for c in c_values:
        total = np.zeros(len(rho_values))
        for rep in range(n_reps):
            scenario = Scenario(n=n, rho_star=rho_star, c=c, seed=seed + rep, beta_mode="constant")
            data, truth = generate(scenario)
            total += truth_grid_scan(rho_values, data, truth)["log_density"].to_numpy()
        mean_log = total / n_reps
        posterior = _normalized(mean_log)
        curves.append(pd.DataFrame({"rho": rho_values, "c": c, "log_density": mean_log, "posterior": posterior}))
        summary.append(
            {
                "c": c,
                "argmax": float(rho_values[int(np.argmax(mean_log))]),
                "iqr_width": _interquartile_width(rho_values, posterior),
            }
        )
    return pd.concat(curves, ignore_index=True), pd.DataFrame(summary)
