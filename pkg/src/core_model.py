"""Core model - data, GP kernel, monotone basis and conditional moments shared by every update"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from .errors import InvalidInputError, NumericalError

logger = logging.getLogger(__name__)

# Diagonal jitter, as a multiple of the kernel variance, tried in order before a factorization fails.
JITTER_LADDER = tuple(10.0 ** k for k in range(-10, -3))


@dataclass(frozen=True)
class Dataset:
    """Observed rows (y, s, t, x) plus the treatment grid t_1 < ... < t_M"""

    y: np.ndarray
    s_obs: np.ndarray
    t_obs: np.ndarray
    x: np.ndarray
    grid: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        s_obs = np.asarray(self.s_obs, dtype=float).ravel()
        t_obs = np.asarray(self.t_obs, dtype=float).ravel()
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1) if x.size else x.reshape(len(y), 0)
        grid = np.asarray(self.grid, dtype=float).ravel()

        n = len(y)
        if not (len(s_obs) == len(t_obs) == x.shape[0] == n):
            raise InvalidInputError(
                f"y, s, t and x must share length n (got {n}, {len(s_obs)}, {len(t_obs)}, {x.shape[0]})"
            )
        if grid.size == 0:
            raise InvalidInputError("treatment grid is empty")
        if np.any(np.diff(grid) <= 0):
            raise InvalidInputError("treatment grid must be strictly increasing")
        for name, arr in (("y", y), ("s", s_obs), ("t", t_obs), ("x", x), ("grid", grid)):
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"{name} contains missing or non-finite values")

        for name, arr in (("y", y), ("s_obs", s_obs), ("t_obs", t_obs), ("x", x), ("grid", grid)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def m(self) -> int:
        return len(self.grid)

    @property
    def mediator_design(self) -> np.ndarray:
        """Covariates with a leading intercept column, as used by the mediator model"""
        return np.column_stack([np.ones(self.n), self.x])

    def far_from_grid(self) -> np.ndarray:
        """Indices of units whose treatment is further than one grid spacing from every grid point"""
        if self.m < 2:
            return np.array([], dtype=int)
        spacing = float(np.min(np.diff(self.grid)))
        gap = np.min(np.abs(self.t_obs[:, None] - self.grid[None, :]), axis=1)
        return np.flatnonzero(gap > spacing)


def make_grid(
    t_obs: np.ndarray,
    lower: Optional[float] = None,
    upper: Optional[float] = None,
    size: int = 10,
    points: Optional[Sequence[float]] = None,
) -> np.ndarray:
    """Explicit grid points, or `size` equally spaced points over [lower, upper] (data range by default)"""
    if points is not None:
        return np.asarray(points, dtype=float)
    lo = float(np.min(t_obs)) if lower is None else float(lower)
    hi = float(np.max(t_obs)) if upper is None else float(upper)
    if size == 1:
        return np.array([0.5 * (lo + hi)])
    if not hi > lo:
        raise InvalidInputError(f"grid bounds must satisfy lower < upper (got {lo}, {hi})")
    return np.linspace(lo, hi, size)


@dataclass(frozen=True)
class KernelParams:
    """Squared-exponential kernel K(t, t') = sigma_s2 * exp(-(t - t')^2 / rho)"""

    rho: float
    sigma_s2: float

    def __post_init__(self):
        if not (np.isfinite(self.rho) and np.isfinite(self.sigma_s2)):
            raise InvalidInputError(f"kernel parameters must be finite (rho={self.rho}, sigma_s2={self.sigma_s2})")
        if self.rho <= 0 or self.sigma_s2 <= 0:
            raise InvalidInputError(f"kernel parameters must be positive (rho={self.rho}, sigma_s2={self.sigma_s2})")


def _check_finite(name: str, arr: np.ndarray):
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")


def cross_cov(a: np.ndarray, b: np.ndarray, params: KernelParams) -> np.ndarray:
    """Kernel matrix between point sets a and b"""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    _check_finite("kernel input", a)
    _check_finite("kernel input", b)
    diff = a[..., :, None] - b[..., None, :]
    return params.sigma_s2 * np.exp(-(diff ** 2) / params.rho)


def kernel_cov(grid: np.ndarray, params: KernelParams, extra_point: Optional[float] = None) -> np.ndarray:
    """Covariance over the grid, bordered by one extra point when given"""
    pts = np.asarray(grid, dtype=float).ravel()
    if pts.size == 0:
        raise InvalidInputError("kernel grid is empty")
    if extra_point is not None:
        pts = np.append(pts, float(extra_point))
    return cross_cov(pts, pts, params)


def bordered_cov(grid: np.ndarray, t_obs: np.ndarray, params: KernelParams) -> np.ndarray:
    """Per-unit (M+1)x(M+1) covariance over (grid, T_i), stacked to shape (n, M+1, M+1)"""
    pts = np.concatenate([np.broadcast_to(grid, (len(t_obs), len(grid))), np.asarray(t_obs)[:, None]], axis=1)
    return cross_cov(pts, pts, params)


def stable_cholesky(cov: np.ndarray, scale: float = 1.0, label: str = "covariance") -> np.ndarray:
    """
    Lower Cholesky factor of one matrix or a stack of matrices.

    Diagonal jitter climbs JITTER_LADDER (times `scale`) separately for each matrix
    until the factorization succeeds.
    """
    cov = np.asarray(cov, dtype=float)
    single = cov.ndim == 2
    stack = cov[None] if single else cov
    eye = np.eye(stack.shape[-1])

    try:
        chol = np.linalg.cholesky(stack + JITTER_LADDER[0] * scale * eye)
        if np.all(np.isfinite(chol)):
            return chol[0] if single else chol
    except np.linalg.LinAlgError:
        pass

    chol = np.empty_like(stack)
    for i, mat in enumerate(stack):
        if not np.all(np.isfinite(mat)):
            raise NumericalError(f"{label} has non-finite entries", unit=i)
        for level, jitter in enumerate(JITTER_LADDER):
            try:
                chol[i] = np.linalg.cholesky(mat + jitter * scale * eye)
                if level > 0:
                    logger.debug("%s %d factorized with jitter %.0e", label, i, jitter)
                break
            except np.linalg.LinAlgError:
                continue
        else:
            raise NumericalError(
                f"{label} not positive definite after maximum jitter",
                unit=i,
                jitter=JITTER_LADDER[-1] * scale,
                min_eigenvalue=float(np.linalg.eigvalsh(mat)[0]),
            )
    return chol[0] if single else chol


def psd_sqrt(cov: np.ndarray, scale: float = 1.0, label: str = "covariance") -> np.ndarray:
    """
    Square root R with R R^T = cov for a stack of PSD matrices, without jitter.

    Eigenvalues in (-1e-8 scale, 0) are rounding and are clipped to zero, so exactly
    degenerate directions (a grid point equal to the observed treatment) stay pinned.
    """
    cov = np.asarray(cov, dtype=float)
    if not np.all(np.isfinite(cov)):
        raise NumericalError(f"{label} has non-finite entries")
    eigval, eigvec = np.linalg.eigh(cov)
    lowest = eigval[..., 0]
    if np.any(lowest < -1e-8 * scale):
        bad = int(np.argmin(lowest)) if lowest.ndim else 0
        raise NumericalError(f"{label} is not positive semi-definite", unit=bad, min_eigenvalue=float(np.min(lowest)))
    return eigvec * np.sqrt(np.clip(eigval, 0.0, None))[..., None, :]


def draw_from_precision(precision: np.ndarray, linear: np.ndarray, z: np.ndarray, label: str) -> np.ndarray:
    """Draw from N(P^-1 h, P^-1) given precision P, linear term h and standard normals z"""
    try:
        factor = linalg.cho_factor(precision, lower=True)
    except linalg.LinAlgError as e:
        raise NumericalError(f"{label} precision is singular", dim=len(linear)) from e
    mean = linalg.cho_solve(factor, linear)
    return mean + linalg.solve_triangular(factor[0], z, lower=True, trans="T")


def posterior_mean_cov(precision: np.ndarray, linear: np.ndarray, label: str):
    """Mean and covariance of the Gaussian with precision P and linear term h"""
    try:
        factor = linalg.cho_factor(precision, lower=True)
    except linalg.LinAlgError as e:
        raise NumericalError(f"{label} precision is singular", dim=len(linear)) from e
    return linalg.cho_solve(factor, linear), linalg.cho_solve(factor, np.eye(len(linear)))


@dataclass(frozen=True)
class MonotoneBasis:
    """
    Piecewise-linear basis b(t) = d(t) A^-1 with d_1(t) = t and d_j(t) = (t - knot_{j-1})_+.

    Coefficients eta = A theta; eta >= 0 on the slope columns gives a nondecreasing phi.
    With an intercept, column 0 is a constant and stays unconstrained.
    """

    knots: np.ndarray
    includes_intercept: bool = True
    a: np.ndarray = field(init=False, repr=False)
    a_inv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float).ravel()
        if np.any(np.diff(knots) <= 0):
            raise InvalidInputError("basis knots must be strictly increasing")
        j = len(knots) + 1
        a = np.tril(np.ones((j, j)))
        a_inv = np.eye(j) - np.eye(j, k=-1)
        for name, arr in (("knots", knots), ("a", a), ("a_inv", a_inv)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_treatments(cls, t_obs: np.ndarray, n_basis: int = 5, intercept: bool = True) -> "MonotoneBasis":
        """Knots at equally spaced interior quantiles of the observed treatments"""
        probs = np.arange(1, n_basis) / n_basis
        knots = np.unique(np.quantile(np.asarray(t_obs, dtype=float), probs))
        return cls(knots=knots, includes_intercept=intercept)

    @property
    def n_slopes(self) -> int:
        return len(self.knots) + 1

    @property
    def n_coef(self) -> int:
        return self.n_slopes + int(self.includes_intercept)

    @property
    def constrained(self) -> np.ndarray:
        """True for coefficients truncated at zero"""
        mask = np.ones(self.n_coef, dtype=bool)
        if self.includes_intercept:
            mask[0] = False
        return mask

    def design(self, t: np.ndarray) -> np.ndarray:
        """Rows b(t) for an array of treatments, shape (..., n_coef)"""
        t = np.asarray(t, dtype=float)
        d = np.concatenate(
            [t[..., None], np.maximum(t[..., None] - self.knots, 0.0)], axis=-1
        )
        b = d @ self.a_inv
        if self.includes_intercept:
            b = np.concatenate([np.ones(t.shape + (1,)), b], axis=-1)
        return b


def basis_row(t: float, basis: MonotoneBasis) -> np.ndarray:
    """b(t) for a single treatment value"""
    if not np.isfinite(t):
        raise InvalidInputError(f"treatment must be finite (got {t})")
    return basis.design(np.asarray(float(t)))


def mean_function(t: float, x: np.ndarray, eta: np.ndarray, alpha: np.ndarray, basis: MonotoneBasis) -> float:
    """m(t, x) = b(t) eta + x alpha"""
    x = np.asarray(x, dtype=float).ravel()
    eta = np.asarray(eta, dtype=float).ravel()
    alpha = np.asarray(alpha, dtype=float).ravel()
    if len(eta) != basis.n_coef:
        raise InvalidInputError(f"eta has length {len(eta)}, basis expects {basis.n_coef}")
    if len(x) != len(alpha):
        raise InvalidInputError(f"x has length {len(x)} but alpha has length {len(alpha)}")
    return float(basis_row(t, basis) @ eta + x @ alpha)


@dataclass(frozen=True)
class ConditionalMoments:
    """Mean and covariance of S_i(t_1..t_M) given the observed S_i"""

    mu_tilde: np.ndarray
    sigma_tilde: np.ndarray


def unit_means(data: Dataset, mediator, basis: MonotoneBasis):
    """
    Mean function of each unit under its current cluster.

    Returns (m_grid, m_obs): m(t_m, X_i) with shape (n, M) and m(T_i, X_i) with shape (n,).
    """
    xa = data.mediator_design @ mediator.alpha
    eta = mediator.clusters.xi[mediator.clusters.z]
    m_grid = eta @ basis.design(data.grid).T + xa[:, None]
    m_obs = np.einsum("ij,ij->i", basis.design(data.t_obs), eta) + xa
    return m_grid, m_obs


def cluster_means(data: Dataset, mediator, basis: MonotoneBasis):
    """Mean function of every unit under every cluster: shapes (n, M, C) and (n, C)"""
    xa = data.mediator_design @ mediator.alpha
    xi = mediator.clusters.xi
    m_grid = (basis.design(data.grid) @ xi.T)[None, :, :] + xa[:, None, None]
    m_obs = basis.design(data.t_obs) @ xi.T + xa[:, None]
    return m_grid, m_obs


def batch_conditional(data: Dataset, kernel: KernelParams, m_grid: np.ndarray, m_obs: np.ndarray):
    """
    Conditional means for all units at once.

    Returns (mu_tilde, k): mu_tilde has the shape of m_grid; k = K(T_i, grid) has shape (n, M).
    A trailing cluster axis on m_grid/m_obs is carried through.
    """
    k = cross_cov(data.t_obs, data.grid, kernel)
    resid = data.s_obs.reshape((-1,) + (1,) * (m_obs.ndim - 1)) - m_obs
    if m_grid.ndim == 3:
        mu_tilde = m_grid + k[:, :, None] * resid[:, None, :] / kernel.sigma_s2
    else:
        mu_tilde = m_grid + k * resid[:, None] / kernel.sigma_s2
    return mu_tilde, k


def conditional_cov(k: np.ndarray, sigma_grid: np.ndarray, sigma_s2: float) -> np.ndarray:
    """Sigma_S - k k^T / sigma_s2 for each row of k, shape (n, M, M)"""
    return sigma_grid[None, :, :] - k[:, :, None] * k[:, None, :] / sigma_s2


def conditional_moments(i: int, data: Dataset, mediator, basis: MonotoneBasis) -> ConditionalMoments:
    """Conditional moments of unit i's potential mediators given its observed mediator"""
    if not 0 <= i < data.n:
        raise InvalidInputError(f"unit index {i} out of range")
    kernel = mediator.kernel
    eta = mediator.clusters.xi[mediator.clusters.z[i]]
    xa = data.mediator_design[i] @ mediator.alpha
    m_grid = basis.design(data.grid) @ eta + xa
    m_obs = basis_row(data.t_obs[i], basis) @ eta + xa

    k = cross_cov(np.array([data.t_obs[i]]), data.grid, kernel)[0]
    mu = m_grid + k * (data.s_obs[i] - m_obs) / kernel.sigma_s2
    sigma = kernel_cov(data.grid, kernel) - np.outer(k, k) / kernel.sigma_s2
    sigma = 0.5 * (sigma + sigma.T)
    # Factorization check only; the jitter is not stored in the snapshot
    stable_cholesky(sigma, kernel.sigma_s2, label=f"conditional covariance of unit {i}")
    mu.setflags(write=False)
    sigma.setflags(write=False)
    return ConditionalMoments(mu_tilde=mu, sigma_tilde=sigma)


def marginal_outcome_terms(
    beta: np.ndarray,
    mu_tilde: np.ndarray,
    k: np.ndarray,
    sigma_grid: np.ndarray,
    sigma_s2: float,
    y_tilde: np.ndarray,
    sigma2: float,
):
    """
    Outcome likelihood with the potential mediators integrated out.

    Y~_i given everything but S_i is N(beta_i' mu~_i, sigma2 + beta_i' Sigma~_i beta_i).
    Returns (log_density, mean, variance); a trailing cluster axis on mu_tilde is supported.
    """
    quad = np.einsum("im,mk,ik->i", beta, sigma_grid, beta) - np.einsum("im,im->i", beta, k) ** 2 / sigma_s2
    var = sigma2 + np.maximum(quad, 0.0)
    if mu_tilde.ndim == 3:
        mean = np.einsum("im,imc->ic", beta, mu_tilde)
        var_b = var[:, None]
        resid = y_tilde[:, None] - mean
    else:
        mean = np.einsum("im,im->i", beta, mu_tilde)
        var_b = var
        resid = y_tilde - mean
    logdens = -0.5 * np.log(2 * np.pi * var_b) - 0.5 * resid ** 2 / var_b
    return logdens, mean, var


@dataclass(frozen=True)
class LambdaBasis:
    """Unconstrained basis for the outcome curve lambda(t)"""

    kind: str = "spline"
    knots: np.ndarray = field(default_factory=lambda: np.zeros(0))
    size: int = 4

    def __post_init__(self):
        if self.kind not in ("spline", "polynomial"):
            raise InvalidInputError(f"unknown lambda basis: {self.kind}")
        knots = np.asarray(self.knots, dtype=float).ravel()
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)

    @classmethod
    def from_treatments(cls, t_obs: np.ndarray, kind: str = "spline", size: int = 4) -> "LambdaBasis":
        """Spline: intercept, t and hinges at interior quantiles (size columns). Polynomial: (1, t, t^2)."""
        if kind == "polynomial":
            return cls(kind=kind, size=3)
        n_knots = max(size - 2, 0)
        probs = np.arange(1, n_knots + 1) / (n_knots + 1)
        knots = np.unique(np.quantile(np.asarray(t_obs, dtype=float), probs)) if n_knots else np.zeros(0)
        if size >= 2:
            size = 2 + len(knots)
        return cls(kind=kind, knots=knots, size=size)

    @property
    def n_coef(self) -> int:
        return 3 if self.kind == "polynomial" else self.size

    def design(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.kind == "polynomial":
            return np.stack([np.ones_like(t), t, t ** 2], axis=-1)
        cols = [np.ones_like(t), t][: self.size]
        cols += [np.maximum(t - k, 0.0) for k in self.knots]
        return np.stack(cols, axis=-1)


@dataclass(frozen=True)
class Priors:
    """Prior hyperparameters; variances are per coordinate"""

    alpha_var: float = 100.0
    xi_mean: float = 0.0
    xi_var: float = 25.0
    sigma_s2_a: float = 1.0
    sigma_s2_b: float = 1.0
    rho_shape: float = 2.0
    rho_rate: float = 0.5
    kappa_shape: float = 1.0
    kappa_rate: float = 1.0
    delta_var: float = 100.0
    gamma_var: float = 100.0
    zeta_var: float = 100.0
    sigma2_a: float = 1.0
    sigma2_b: float = 1.0

    @property
    def rho_mean(self) -> float:
        return self.rho_shape / self.rho_rate

    @property
    def rho_sd(self) -> float:
        return float(np.sqrt(self.rho_shape) / self.rho_rate)


@dataclass(frozen=True)
class ModelSpec:
    """Everything about the model that stays fixed during a run"""

    basis: MonotoneBasis
    lambda_basis: LambdaBasis
    beta_form: str = "linear"
    truncation: int = 20
    priors: Priors = field(default_factory=Priors)

    @classmethod
    def from_settings(cls, model: dict, priors: dict, t_obs: np.ndarray) -> "ModelSpec":
        """Build from the `model` and `priors` config sections; knots come from the observed treatments"""
        return cls(
            basis=MonotoneBasis.from_treatments(t_obs, model["n_basis"], model["intercept"]),
            lambda_basis=LambdaBasis.from_treatments(t_obs, model["lambda_basis"], model["lambda_size"]),
            beta_form=model["beta_form"],
            truncation=int(model["truncation"]),
            priors=Priors(**priors),
        )
