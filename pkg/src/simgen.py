"""Synthetic data from the simulation designs, with ground truth and a population oracle"""

import logging
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from .core_model import Dataset, KernelParams, bordered_cov, kernel_cov, stable_cholesky
from .errors import EmptyStratumError, InvalidInputError
from .estimands import StratumSpec
from .rng import stream

logger = logging.getLogger(__name__)

GRID_LOWER = -1.15
GRID_UPPER = 1.15
GRID_SIZE = 10
TRUE_ALPHA = (0.3, -0.2, 0.0, 0.0, 0.0)
TRUE_GAMMA = (-0.3, -0.2, 0.0, 0.3, 0.0)
TREATMENT_COEF = (0.15, 0.25)
TREATMENT_VAR = 0.5
N_TRUE_CLUSTERS = 3

# Stream keys under the scenario seed
_DATA_KEY = 0
_POPULATION_KEY = 1


@dataclass(frozen=True)
class Scenario:
    """
    Simulation settings.

    beta_mode "surface" uses beta(t, t') = c (0.3 + 0.1 t + 0.2 t'), with the quadratic terms
    0.1 t^2 + 0.15 t'^2 added when misspecified. "constant" uses beta_i = c 1_M.
    """

    n: int = 500
    p: int = 5
    rho_star: float = 3.0
    c: float = 0.0
    misspecified: bool = False
    seed: int = 1
    sigma_s2: float = 1.0
    sigma2: float = 0.5
    beta_mode: str = "surface"

    def __post_init__(self):
        if self.n < 1 or self.p < 2:
            raise InvalidInputError("scenario needs n >= 1 and p >= 2")
        if not (self.rho_star > 0 and self.sigma_s2 > 0 and self.sigma2 > 0):
            raise InvalidInputError("rho_star, sigma_s2 and sigma2 must be positive")
        if self.beta_mode not in ("surface", "constant"):
            raise InvalidInputError(f"unknown beta_mode {self.beta_mode!r}")
        if self.misspecified and self.beta_mode == "constant":
            raise InvalidInputError("a misspecified truth needs beta_mode \"surface\"")

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(GRID_LOWER, GRID_UPPER, GRID_SIZE)

    @property
    def alpha(self) -> np.ndarray:
        return _fit_length(TRUE_ALPHA, self.p)

    @property
    def gamma(self) -> np.ndarray:
        return _fit_length(TRUE_GAMMA, self.p)


def _fit_length(values: Sequence[float], p: int) -> np.ndarray:
    out = np.zeros(p)
    k = min(p, len(values))
    out[:k] = values[:k]
    return out


def true_phi(t: np.ndarray, cluster: np.ndarray) -> np.ndarray:
    """Cluster 0 flat, cluster 1 0.4 (t + e^t), cluster 2 t + e^t"""
    t = np.asarray(t, dtype=float)
    scale = np.array([0.0, 0.4, 1.0])[np.asarray(cluster)]
    return scale * (t + np.exp(t))


def true_lambda(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return t + 0.3 * t ** 2


def true_beta(t: np.ndarray, t_prime: np.ndarray, scenario: Scenario) -> np.ndarray:
    t, t_prime = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(t_prime, dtype=float))
    if scenario.beta_mode == "constant":
        return np.full(t.shape, scenario.c)
    surface = 0.3 + 0.1 * t + 0.2 * t_prime
    if scenario.misspecified:
        surface = surface + 0.1 * t ** 2 + 0.15 * t_prime ** 2
    return scenario.c * surface


def linear_beta_fit(t_obs: np.ndarray, grid: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Least-squares projection of beta_i(t_m) onto zeta0 + zeta1 t + zeta2 t', evaluated back on (t_i, t_m)"""
    t, t_prime = np.broadcast_arrays(np.asarray(t_obs, dtype=float)[:, None], np.asarray(grid, dtype=float)[None, :])
    design = np.column_stack([np.ones(t.size), t.ravel(), t_prime.ravel()])
    coef, *_ = np.linalg.lstsq(design, beta.ravel(), rcond=None)
    return (design @ coef).reshape(beta.shape)


@dataclass
class GroundTruth:
    """Generating parameters plus the per-unit true means used by the rho diagnostics"""

    scenario: Scenario
    cluster: np.ndarray
    s_grid: np.ndarray
    m_grid: np.ndarray
    m_obs: np.ndarray
    beta: np.ndarray
    y_tilde: np.ndarray
    # beta as the linear analysis model sees it; equals beta unless the truth is misspecified
    beta_fit: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.beta_fit is None:
            self.beta_fit = self.beta

    def to_dict(self) -> dict:
        return {
            "scenario": asdict(self.scenario),
            "alpha": self.scenario.alpha.tolist(),
            "gamma": self.scenario.gamma.tolist(),
            "lambda": "t + 0.3 t^2",
            "cluster_counts": np.bincount(self.cluster, minlength=N_TRUE_CLUSTERS).tolist(),
            "cluster": self.cluster.tolist(),
        }


def _covariates_and_clusters(rng: np.random.Generator, n: int, p: int):
    x = rng.standard_normal((n, p))
    cluster = rng.integers(0, N_TRUE_CLUSTERS, size=n)
    return x, cluster


def generate(scenario: Scenario):
    """Simulate one dataset; returns (Dataset, GroundTruth)"""
    rng = stream(scenario.seed, _DATA_KEY)
    n, grid = scenario.n, scenario.grid
    x, cluster = _covariates_and_clusters(rng, n, scenario.p)
    t_obs = x[:, 0] * TREATMENT_COEF[0] + x[:, 1] * TREATMENT_COEF[1] + np.sqrt(TREATMENT_VAR) * rng.standard_normal(n)

    kernel = KernelParams(scenario.rho_star, scenario.sigma_s2)
    points = np.concatenate([np.broadcast_to(grid, (n, len(grid))), t_obs[:, None]], axis=1)
    mean = true_phi(points, cluster[:, None]) + (x @ scenario.alpha)[:, None]
    chol = stable_cholesky(bordered_cov(grid, t_obs, kernel), scenario.sigma_s2, label="simulation covariance")
    draws = mean + np.einsum("imk,ik->im", chol, rng.standard_normal(points.shape))
    s_grid, s_obs = draws[:, :-1], draws[:, -1]

    beta = true_beta(t_obs[:, None], grid[None, :], scenario)
    signal = true_lambda(t_obs) + x @ scenario.gamma
    y = signal + np.einsum("im,im->i", beta, s_grid) + np.sqrt(scenario.sigma2) * rng.standard_normal(n)

    data = Dataset(y=y, s_obs=s_obs, t_obs=t_obs, x=x, grid=grid)
    truth = GroundTruth(
        scenario=scenario,
        cluster=cluster,
        s_grid=s_grid,
        m_grid=mean[:, :-1],
        m_obs=mean[:, -1],
        beta=beta,
        y_tilde=y - signal,
        beta_fit=linear_beta_fit(t_obs, grid, beta) if scenario.misspecified else beta,
    )
    return data, truth


@dataclass(frozen=True)
class EffectTarget:
    """E[Y(t1) - Y(t0) | stratum]"""

    name: str
    stratum: StratumSpec = field(default_factory=StratumSpec)
    t1: float = 0.5
    t0: float = -0.5


def default_targets(threshold: float = 2.5) -> List[EffectTarget]:
    """ATE plus the effects among units with small and large mediator range"""
    return [
        EffectTarget("ate", StratumSpec("range")),
        EffectTarget("pce_range_below", StratumSpec("range", -np.inf, threshold)),
        EffectTarget("pce_range_above", StratumSpec("range", threshold, np.inf)),
    ]


def oracle_truth(
    scenario: Scenario,
    targets: Optional[List[EffectTarget]] = None,
    n_pop: int = 1_000_000,
    block_size: int = 100_000,
) -> pd.DataFrame:
    """
    Stratum effects by simulating a population of full potential-mediator trajectories.

    Potential outcomes share their noise across t, so only the mean surfaces enter the contrast.
    Returns columns estimand, value, mc_se, n_in_stratum.
    """
    targets = targets or default_targets()
    grid = scenario.grid
    chol = stable_cholesky(kernel_cov(grid, KernelParams(scenario.rho_star, scenario.sigma_s2)), scenario.sigma_s2)
    sums = np.zeros(len(targets))
    sumsq = np.zeros(len(targets))
    counts = np.zeros(len(targets), dtype=int)

    n_blocks = int(np.ceil(n_pop / block_size))
    for block in range(n_blocks):
        rng = stream(scenario.seed, _POPULATION_KEY, block)
        size = min(block_size, n_pop - block * block_size)
        x, cluster = _covariates_and_clusters(rng, size, scenario.p)
        s = true_phi(grid[None, :], cluster[:, None]) + (x @ scenario.alpha)[:, None]
        s = s + rng.standard_normal((size, len(grid))) @ chol.T

        for k, target in enumerate(targets):
            inside = target.stratum.contains(s)
            effect = (
                true_lambda(target.t1)
                - true_lambda(target.t0)
                + s[inside] @ (true_beta(target.t1, grid, scenario) - true_beta(target.t0, grid, scenario))
            )
            sums[k] += effect.sum()
            sumsq[k] += (effect ** 2).sum()
            counts[k] += inside.sum()

    rows = []
    for k, target in enumerate(targets):
        if counts[k] == 0:
            raise EmptyStratumError(f"{target.name}: no population unit falls in {target.stratum.label}")
        mean = sums[k] / counts[k]
        var = max(sumsq[k] / counts[k] - mean ** 2, 0.0)
        rows.append(
            {
                "estimand": target.name,
                "value": mean,
                "mc_se": np.sqrt(var / counts[k]),
                "n_in_stratum": int(counts[k]),
            }
        )
    return pd.DataFrame(rows)
