"""Outcome model updates - lambda(t) coefficients, covariate effects, bilinear mediator effects, residual variance"""

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .core_model import Dataset, ModelSpec, draw_from_precision
from .errors import InvalidInputError, NumericalError


@dataclass(frozen=True)
class OutcomeState:
    """Y_i = lambda(T_i) + X_i gamma + sum_m beta(T_i, t_m) S_i(t_m) + N(0, sigma2)"""

    delta: np.ndarray
    gamma: np.ndarray
    zeta: np.ndarray
    sigma2: float

    def __post_init__(self):
        for name in ("delta", "gamma", "zeta"):
            arr = np.asarray(getattr(self, name), dtype=float).ravel()
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"outcome {name} contains non-finite values")
            object.__setattr__(self, name, arr)
        if not (np.isfinite(self.sigma2) and self.sigma2 > 0):
            raise InvalidInputError(f"sigma2 must be positive (got {self.sigma2})")
        object.__setattr__(self, "sigma2", float(self.sigma2))


def n_beta_terms(beta_form: str) -> int:
    return 5 if beta_form == "quadratic" else 3


def beta_features(t: np.ndarray, t_prime: np.ndarray, beta_form: str = "linear") -> np.ndarray:
    """h(t, t') with beta(t, t') = h(t, t') zeta; broadcasts t against t_prime"""
    t, t_prime = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(t_prime, dtype=float))
    cols = [np.ones_like(t), t, t_prime]
    if beta_form == "quadratic":
        cols += [t ** 2, t_prime ** 2]
    return np.stack(cols, axis=-1)


def beta_vectors(zeta: np.ndarray, t: np.ndarray, grid: np.ndarray, beta_form: str = "linear") -> np.ndarray:
    """beta(t_i, t_m) for each treatment in t, shape (len(t), M)"""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    return beta_features(t[:, None], grid[None, :], beta_form) @ zeta


def mediator_features(aug: np.ndarray, data: Dataset, beta_form: str = "linear") -> np.ndarray:
    """W_i = sum_m h(T_i, t_m) S_i(t_m), shape (n, q)"""
    h = beta_features(data.t_obs[:, None], data.grid[None, :], beta_form)
    return np.einsum("nm,nmq->nq", aug, h)


def collapsed_outcome(outcome: OutcomeState, data: Dataset, spec: ModelSpec):
    """Per-unit beta vectors and the outcome with lambda(T) and X gamma removed"""
    beta = beta_vectors(outcome.zeta, data.t_obs, data.grid, spec.beta_form)
    y_tilde = data.y - spec.lambda_basis.design(data.t_obs) @ outcome.delta - data.x @ outcome.gamma
    return beta, y_tilde


def _conjugate_normal(
    design: np.ndarray, target: np.ndarray, sigma2: float, prior_var: float, rng: np.random.Generator, label: str
) -> np.ndarray:
    k = design.shape[1]
    precision = design.T @ design / sigma2 + np.eye(k) / prior_var
    linear = design.T @ target / sigma2
    return draw_from_precision(precision, linear, rng.standard_normal(k), label)


def _check_aug(aug: np.ndarray, data: Dataset):
    if aug.shape != (data.n, data.m):
        raise InvalidInputError(f"augmented mediators have shape {aug.shape}, expected {(data.n, data.m)}")


def update_delta(outcome: OutcomeState, data: Dataset, aug: np.ndarray, spec: ModelSpec, rng: np.random.Generator):
    """Draw delta given the other outcome parameters"""
    _check_aug(aug, data)
    w = mediator_features(aug, data, spec.beta_form)
    target = data.y - data.x @ outcome.gamma - w @ outcome.zeta
    design = spec.lambda_basis.design(data.t_obs)
    return _conjugate_normal(design, target, outcome.sigma2, spec.priors.delta_var, rng, "delta")


def update_gamma(outcome: OutcomeState, data: Dataset, aug: np.ndarray, spec: ModelSpec, rng: np.random.Generator):
    """Draw gamma given the other outcome parameters"""
    _check_aug(aug, data)
    if data.p == 0:
        return np.zeros(0)
    w = mediator_features(aug, data, spec.beta_form)
    target = data.y - spec.lambda_basis.design(data.t_obs) @ outcome.delta - w @ outcome.zeta
    return _conjugate_normal(data.x, target, outcome.sigma2, spec.priors.gamma_var, rng, "gamma")


def update_zeta(outcome: OutcomeState, data: Dataset, aug: np.ndarray, spec: ModelSpec, rng: np.random.Generator):
    """Draw zeta given the imputed mediators"""
    _check_aug(aug, data)
    w = mediator_features(aug, data, spec.beta_form)
    target = data.y - spec.lambda_basis.design(data.t_obs) @ outcome.delta - data.x @ outcome.gamma
    return _conjugate_normal(w, target, outcome.sigma2, spec.priors.zeta_var, rng, "zeta")


def outcome_residuals(outcome: OutcomeState, data: Dataset, aug: np.ndarray, spec: ModelSpec) -> np.ndarray:
    w = mediator_features(aug, data, spec.beta_form)
    return (
        data.y
        - spec.lambda_basis.design(data.t_obs) @ outcome.delta
        - data.x @ outcome.gamma
        - w @ outcome.zeta
    )


def update_sigma2(outcome: OutcomeState, data: Dataset, aug: np.ndarray, spec: ModelSpec, rng: np.random.Generator):
    """Inverse-gamma draw for the residual variance"""
    _check_aug(aug, data)
    resid = outcome_residuals(outcome, data, aug, spec)
    shape = spec.priors.sigma2_a + 0.5 * data.n
    scale = spec.priors.sigma2_b + 0.5 * float(resid @ resid)
    if not (np.isfinite(scale) and scale > 0):
        raise NumericalError("sigma2 posterior scale is not positive", scale=scale)
    return float(stats.invgamma.rvs(shape, scale=scale, random_state=rng))


def outcome_means(t: np.ndarray, s: np.ndarray, x: np.ndarray, outcome: OutcomeState, spec: ModelSpec, grid: np.ndarray) -> np.ndarray:
    """lambda(t_k) + sum_m beta(t_k, t_m) s_um + x_u gamma for every unit u and query t_k, shape (U, K)"""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    s = np.atleast_2d(np.asarray(s, dtype=float))
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if s.shape[1] != len(grid) or x.shape[1] != len(outcome.gamma) or len(s) != len(x):
        raise InvalidInputError("trajectory or covariate length does not match the model")
    lam = spec.lambda_basis.design(t) @ outcome.delta
    beta = beta_vectors(outcome.zeta, t, grid, spec.beta_form)
    return lam[None, :] + (x @ outcome.gamma)[:, None] + s @ beta.T


def predict_outcome_mean(t: float, s: np.ndarray, x: np.ndarray, outcome: OutcomeState, spec: ModelSpec, grid: np.ndarray) -> float:
    """lambda(t) + sum_m beta(t, t_m) s_m + x gamma"""
    s = np.asarray(s, dtype=float).ravel()
    x = np.asarray(x, dtype=float).ravel()
    return float(outcome_means(np.array([t]), s[None], x[None], outcome, spec, grid)[0, 0])
