"""Mediator model updates - DP mixture, covariate coefficients, kernel variance and the collapsed rho step"""

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import special, stats

from .core_model import (
    Dataset,
    KernelParams,
    ModelSpec,
    batch_conditional,
    bordered_cov,
    cluster_means,
    draw_from_precision,
    kernel_cov,
    marginal_outcome_terms,
    stable_cholesky,
    unit_means,
)
from .errors import InvalidInputError, NumericalError
from .outcome_sampler import OutcomeState, collapsed_outcome

logger = logging.getLogger(__name__)

# Redraws of a non-finite truncated-normal coordinate before giving up
ATOM_RETRIES = 3


@dataclass
class ClusterState:
    """Truncated DP mixture: labels, atoms, stick weights and concentration. Cluster 0 is pinned flat."""

    z: np.ndarray
    xi: np.ndarray
    v: np.ndarray
    pi: np.ndarray
    kappa: float

    @property
    def n_clusters(self) -> int:
        return len(self.v)

    def counts(self) -> np.ndarray:
        return np.bincount(self.z, minlength=self.n_clusters)

    def copy(self) -> "ClusterState":
        return ClusterState(self.z.copy(), self.xi.copy(), self.v.copy(), self.pi.copy(), float(self.kappa))


@dataclass
class MediatorState:
    kernel: KernelParams
    alpha: np.ndarray
    clusters: ClusterState

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float).ravel()
        if not np.all(np.isfinite(self.alpha)):
            raise InvalidInputError("alpha contains non-finite values")

    def copy(self) -> "MediatorState":
        return MediatorState(self.kernel, self.alpha.copy(), self.clusters.copy())


def stick_breaking(v: np.ndarray) -> np.ndarray:
    """pi_c = V_c prod_{j<c} (1 - V_j)"""
    v = np.asarray(v, dtype=float)
    remaining = np.concatenate([[1.0], np.cumprod(1.0 - v[:-1])])
    return v * remaining


# Shared augmented-mediator quantities


@dataclass
class _Bordered:
    """Per-unit stacked mediator vector S~_i = (S_i(grid), S_i) and the whitening factor of Sigma_K,i"""

    s_tilde: np.ndarray
    chol: np.ndarray
    basis: np.ndarray
    design: np.ndarray = field(repr=False)

    def whiten(self, v: np.ndarray) -> np.ndarray:
        """L^-1 v per unit; v has shape (n, M+1) or (n, M+1, k)"""
        if v.ndim == 2:
            return np.linalg.solve(self.chol, v[..., None])[..., 0]
        return np.linalg.solve(self.chol, v)


def _bordered(data: Dataset, kernel: KernelParams, aug: np.ndarray, spec: ModelSpec) -> _Bordered:
    if aug.shape != (data.n, data.m):
        raise InvalidInputError(f"augmented mediators have shape {aug.shape}, expected {(data.n, data.m)}")
    # Kernel scaled to unit variance, so the factor does not depend on sigma_s2
    unit_kernel = KernelParams(kernel.rho, 1.0)
    chol = stable_cholesky(bordered_cov(data.grid, data.t_obs, unit_kernel), 1.0, label="bordered covariance")
    points = np.concatenate([np.broadcast_to(data.grid, (data.n, data.m)), data.t_obs[:, None]], axis=1)
    return _Bordered(
        s_tilde=np.concatenate([aug, data.s_obs[:, None]], axis=1),
        chol=chol,
        basis=spec.basis.design(points),
        design=data.mediator_design,
    )


def _phi_tilde(bordered: _Bordered, clusters: ClusterState) -> np.ndarray:
    return np.einsum("nmj,nj->nm", bordered.basis, clusters.xi[clusters.z])


# Conjugate blocks


def update_alpha(state: MediatorState, data: Dataset, aug: np.ndarray, spec: ModelSpec, rng: np.random.Generator):
    """Draw alpha given the imputed mediators, cluster atoms and kernel"""
    b = _bordered(data, state.kernel, aug, spec)
    resid = b.s_tilde - _phi_tilde(b, state.clusters)
    ones_w = b.whiten(np.ones_like(resid))
    resid_w = b.whiten(resid)
    # X~_i = 1 x~_i^T, so each unit contributes (1' Sigma^-1 1) x~ x~^T
    gram = np.einsum("nm,nm->n", ones_w, ones_w) / state.kernel.sigma_s2
    cross = np.einsum("nm,nm->n", ones_w, resid_w) / state.kernel.sigma_s2

    x = b.design
    k = x.shape[1]
    precision = (x * gram[:, None]).T @ x + np.eye(k) / spec.priors.alpha_var
    linear = x.T @ cross
    return draw_from_precision(precision, linear, rng.standard_normal(k), "alpha")


def update_sigma_s2(state: MediatorState, data: Dataset, aug: np.ndarray, spec: ModelSpec, rng: np.random.Generator):
    """Inverse-gamma draw for the kernel variance"""
    b = _bordered(data, state.kernel, aug, spec)
    resid = b.s_tilde - _phi_tilde(b, state.clusters) - (b.design @ state.alpha)[:, None]
    resid_w = b.whiten(resid)
    shape = spec.priors.sigma_s2_a + 0.5 * data.n * (data.m + 1)
    scale = spec.priors.sigma_s2_b + 0.5 * float(np.sum(resid_w ** 2))
    if not (np.isfinite(scale) and scale > 0):
        raise NumericalError("sigma_s2 posterior scale is not positive", scale=scale)
    return float(stats.invgamma.rvs(shape, scale=scale, random_state=rng))


def update_stick_weights(state: MediatorState, rng: np.random.Generator):
    """V_j ~ Beta(1 + n_j, kappa + sum_{l>j} n_l); returns (v, pi)"""
    clusters = state.clusters
    counts = clusters.counts()
    tail = np.cumsum(counts[::-1])[::-1] - counts
    v = rng.beta(1.0 + counts, clusters.kappa + tail)
    v[-1] = 1.0
    return v, stick_breaking(v)


def kappa_log_conditional(kappa: np.ndarray, k: int, n: int, shape: float, rate: float) -> np.ndarray:
    """Unnormalized log full conditional of kappa given k occupied clusters among n units"""
    kappa = np.asarray(kappa, dtype=float)
    return (shape + k - 1) * np.log(kappa) - rate * kappa + special.gammaln(kappa) - special.gammaln(kappa + n)


def update_kappa(state: MediatorState, spec: ModelSpec, rng: np.random.Generator) -> float:
    """Auxiliary-variable draw of the DP concentration under a Gamma prior"""
    clusters = state.clusters
    n = len(clusters.z)
    k = int(np.count_nonzero(clusters.counts()))
    if k < 1:
        raise InvalidInputError("kappa update needs at least one occupied cluster")
    a, b = spec.priors.kappa_shape, spec.priors.kappa_rate

    eta = rng.beta(clusters.kappa + 1.0, n)
    rate = b - np.log(eta)
    odds = (a + k - 1.0) / (n * rate)
    shape = a + k if rng.random() < odds / (1.0 + odds) else a + k - 1.0
    return float(rng.gamma(shape, 1.0 / rate))


# Collapsed blocks


def update_labels(state: MediatorState, data: Dataset, outcome: OutcomeState, spec: ModelSpec, rng: np.random.Generator):
    """Draw every z_i with its potential mediators integrated out"""
    kernel = state.kernel
    m_grid, m_obs = cluster_means(data, state, spec.basis)
    mu_tilde, k = batch_conditional(data, kernel, m_grid, m_obs)
    beta, y_tilde = collapsed_outcome(outcome, data, spec)
    sigma_grid = kernel_cov(data.grid, kernel)
    log_y, _, _ = marginal_outcome_terms(beta, mu_tilde, k, sigma_grid, kernel.sigma_s2, y_tilde, outcome.sigma2)

    log_s = stats.norm.logpdf(data.s_obs[:, None], m_obs, np.sqrt(kernel.sigma_s2))
    with np.errstate(divide="ignore"):
        log_w = np.log(state.clusters.pi)[None, :] + log_s + log_y
    log_norm = special.logsumexp(log_w, axis=1, keepdims=True)
    bad = ~np.isfinite(log_norm[:, 0])
    if np.any(bad):
        raise NumericalError("label weights are degenerate", units=np.flatnonzero(bad)[:5].tolist())

    probs = np.exp(log_w - log_norm)
    u = rng.random(data.n)
    z = np.sum(np.cumsum(probs, axis=1) < u[:, None], axis=1)
    return np.minimum(z, state.clusters.n_clusters - 1)


def _truncated_gibbs(
    mean: np.ndarray,
    precision: np.ndarray,
    start: np.ndarray,
    constrained: np.ndarray,
    uniforms: np.ndarray,
    rng: np.random.Generator,
    cluster: int,
) -> np.ndarray:
    """Coordinate-wise Gibbs for N(mean, precision^-1) truncated to x_j >= 0 on constrained coordinates"""
    x = np.where(constrained, np.maximum(start, 0.0), start)
    for sweep_u in uniforms:
        for j in range(len(x)):
            sd = 1.0 / np.sqrt(precision[j, j])
            others = precision[j] @ (x - mean) - precision[j, j] * (x[j] - mean[j])
            loc = mean[j] - others / precision[j, j]
            u = sweep_u[j]
            for attempt in range(ATOM_RETRIES + 1):
                if constrained[j]:
                    draw = stats.truncnorm.ppf(u, -loc / sd, np.inf, loc=loc, scale=sd)
                else:
                    draw = stats.norm.ppf(u, loc=loc, scale=sd)
                if np.isfinite(draw):
                    break
                u = rng.random()
            else:
                raise NumericalError(
                    "truncated normal draw did not converge", cluster=cluster, coordinate=j, retries=ATOM_RETRIES
                )
            x[j] = max(draw, 0.0) if constrained[j] else draw
    return x


def prior_atoms(spec: ModelSpec, count: int, rng: np.random.Generator) -> np.ndarray:
    """Independent draws of atoms from the truncated prior, shape (count, n_coef)"""
    mean, sd = spec.priors.xi_mean, np.sqrt(spec.priors.xi_var)
    u = rng.random((count, spec.basis.n_coef))
    truncated = stats.truncnorm.ppf(u, -mean / sd, np.inf, loc=mean, scale=sd)
    free = stats.norm.ppf(u, loc=mean, scale=sd)
    return np.where(spec.basis.constrained, truncated, free)


def update_atoms(
    state: MediatorState, data: Dataset, aug: np.ndarray, spec: ModelSpec, rng: np.random.Generator, sweeps: int = 5
) -> np.ndarray:
    """Draw xi_c for c >= 1 from their truncated normal conditionals; xi_0 stays zero"""
    clusters = state.clusters
    b = _bordered(data, state.kernel, aug, spec)
    resid = b.s_tilde - (b.design @ state.alpha)[:, None]
    basis_w = b.whiten(b.basis)
    resid_w = b.whiten(resid)
    gram = np.einsum("nmj,nmk->njk", basis_w, basis_w) / state.kernel.sigma_s2
    cross = np.einsum("nmj,nm->nj", basis_w, resid_w) / state.kernel.sigma_s2

    n_coef = spec.basis.n_coef
    prior_prec = np.eye(n_coef) / spec.priors.xi_var
    prior_lin = np.full(n_coef, spec.priors.xi_mean / spec.priors.xi_var)
    uniforms = rng.random((clusters.n_clusters, sweeps, n_coef))

    xi = clusters.xi.copy()
    xi[0] = 0.0
    for c in range(1, clusters.n_clusters):
        members = clusters.z == c
        precision = prior_prec + gram[members].sum(axis=0)
        linear = prior_lin + cross[members].sum(axis=0)
        try:
            mean = np.linalg.solve(precision, linear)
        except np.linalg.LinAlgError as e:
            raise NumericalError("atom precision is singular", cluster=c) from e
        xi[c] = _truncated_gibbs(mean, precision, xi[c], spec.basis.constrained, uniforms[c], rng, c)
    return xi


# Collapsed rho step


def rho_log_target_arrays(
    rho: float,
    sigma_s2: float,
    data: Dataset,
    m_grid: np.ndarray,
    m_obs: np.ndarray,
    beta: np.ndarray,
    y_tilde: np.ndarray,
    sigma2: float,
    prior: Optional[tuple] = (2.0, 0.5),
) -> float:
    """
    log P(rho | D) up to a constant, from the mediator means and the collapsed outcome pieces.

    `prior` is (shape, rate) of the Gamma prior, or None for a flat prior.
    """
    if not rho > 0:
        raise InvalidInputError(f"rho must be positive (got {rho})")
    kernel = KernelParams(rho, sigma_s2)
    mu_tilde, k = batch_conditional(data, kernel, m_grid, m_obs)
    sigma_grid = kernel_cov(data.grid, kernel)
    log_y, _, _ = marginal_outcome_terms(beta, mu_tilde, k, sigma_grid, sigma_s2, y_tilde, sigma2)
    total = float(np.sum(log_y))
    if prior is not None:
        shape, rate = prior
        total += float(stats.gamma.logpdf(rho, shape, scale=1.0 / rate))
    return total


def collapsed_log_target(rho: float, data: Dataset, state: MediatorState, outcome: OutcomeState, spec: ModelSpec) -> float:
    """Target of the rho step: potential mediators integrated out, everything else held fixed"""
    m_grid, m_obs = unit_means(data, state, spec.basis)
    beta, y_tilde = collapsed_outcome(outcome, data, spec)
    return rho_log_target_arrays(
        rho,
        state.kernel.sigma_s2,
        data,
        m_grid,
        m_obs,
        beta,
        y_tilde,
        outcome.sigma2,
        prior=(spec.priors.rho_shape, spec.priors.rho_rate),
    )


@dataclass
class RhoStep:
    rho: float
    accepted: bool
    log_target: float
    flagged: bool = False


class RhoProposal:
    """Random-walk step size for rho, tuned toward a target acceptance band during burn-in"""

    def __init__(self, step: float, low: float = 0.30, high: float = 0.40, adapt_every: int = 50):
        self.step = float(step)
        self.low = low
        self.high = high
        self.adapt_every = adapt_every
        self._window = 0
        self._window_accepted = 0
        self.total = 0
        self.accepted = 0

    def record(self, accepted: bool):
        self._window += 1
        self._window_accepted += int(accepted)
        self.total += 1
        self.accepted += int(accepted)

    def adapt(self):
        """Rescale the step once a full window has been recorded"""
        if self._window < self.adapt_every:
            return
        rate = self._window_accepted / self._window
        if rate < self.low:
            self.step *= 0.8
        elif rate > self.high:
            self.step *= 1.25
        self._window = 0
        self._window_accepted = 0

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.total if self.total else float("nan")


def update_rho(
    state: MediatorState,
    data: Dataset,
    outcome: OutcomeState,
    spec: ModelSpec,
    rng: np.random.Generator,
    step: float,
) -> RhoStep:
    """Metropolis-Hastings step on rho with a random walk truncated at zero"""
    rho = state.kernel.rho
    current = collapsed_log_target(rho, data, state, outcome, spec)
    u_prop, u_accept = rng.random(2)
    proposal = float(stats.truncnorm.ppf(u_prop, -rho / step, np.inf, loc=rho, scale=step))
    if not (np.isfinite(proposal) and proposal > 0):
        logger.debug("rho proposal %r rejected", proposal)
        return RhoStep(rho, False, current, flagged=True)

    proposed_state = replace(state, kernel=KernelParams(proposal, state.kernel.sigma_s2))
    try:
        candidate = collapsed_log_target(proposal, data, proposed_state, outcome, spec)
    except NumericalError as e:
        logger.warning("rho proposal %.4g rejected: %s", proposal, e)
        return RhoStep(rho, False, current, flagged=True)
    if not np.isfinite(candidate):
        logger.warning("rho proposal %.4g rejected: non-finite log target", proposal)
        return RhoStep(rho, False, current, flagged=True)

    # Truncation at zero makes the proposal asymmetric
    correction = stats.norm.logcdf(rho / step) - stats.norm.logcdf(proposal / step)
    log_ratio = candidate - current + correction
    if np.log(u_accept) < log_ratio:
        return RhoStep(proposal, True, candidate)
    return RhoStep(rho, False, current)
