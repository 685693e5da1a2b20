"""Principal-strata exposure-response curves from posterior draws"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from .core_model import Dataset, ModelSpec, kernel_cov, stable_cholesky
from .errors import EmptyStratumError, InvalidInputError
from .mediator_sampler import MediatorState
from .outcome_sampler import OutcomeState, outcome_means
from .rng import BLOCK_ESTIMAND, stream

logger = logging.getLogger(__name__)


def g_range(s: np.ndarray) -> np.ndarray:
    """max_t S(t) - min_t S(t) over the last axis"""
    s = np.asarray(s, dtype=float)
    return s.max(axis=-1) - s.min(axis=-1)


def g_mean(s: np.ndarray) -> np.ndarray:
    return np.asarray(s, dtype=float).mean(axis=-1)


def g_avg_abs_deriv(s: np.ndarray) -> np.ndarray:
    """Integral of |S'(t)| for the piecewise-linear interpolant through the grid values"""
    s = np.asarray(s, dtype=float)
    if s.shape[-1] < 2:
        raise InvalidInputError("the derivative summary needs at least two grid points")
    return np.abs(np.diff(s, axis=-1)).sum(axis=-1)


G_FUNCTIONS = {"range": g_range, "mean": g_mean, "avg_abs_deriv": g_avg_abs_deriv}


@dataclass(frozen=True)
class StratumSpec:
    """Units with a < g(S) < b. A custom g must reduce over the last axis."""

    g: str = "range"
    a: float = -np.inf
    b: float = np.inf
    func: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if self.g == "custom":
            if self.func is None:
                raise InvalidInputError("a custom stratum needs a g function")
        elif self.g not in G_FUNCTIONS:
            raise InvalidInputError(f"unknown g function {self.g!r}; choose from {sorted(G_FUNCTIONS)} or custom")
        if np.isnan(self.a) or np.isnan(self.b) or not self.a < self.b:
            raise InvalidInputError(f"stratum bounds must satisfy a < b (got a={self.a}, b={self.b})")

    def evaluate(self, s: np.ndarray) -> np.ndarray:
        func = self.func if self.g == "custom" else G_FUNCTIONS[self.g]
        return func(s)

    def contains(self, s: np.ndarray) -> np.ndarray:
        values = self.evaluate(s)
        return (values > self.a) & (values < self.b)

    @property
    def label(self) -> str:
        return f"{self.a:g} < {self.g}(S) < {self.b:g}"


@dataclass
class PsCurve:
    """
    Posterior summary of a curve over t; `values` keeps the per-draw curves (NaN rows for missing draws).

    lower and upper are equal-tailed quantiles, widened to reach the mean when heavily skewed draws put it outside.
    """

    t: np.ndarray
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    stratum_fraction: np.ndarray
    values: np.ndarray
    level: float = 0.95
    n_missing: int = 0
    n_unresolved: int = 0

    def to_frame(self) -> pd.DataFrame:
        pct = f"{100 * self.level:g}"
        return pd.DataFrame(
            {
                "t": self.t,
                "mean": self.mean,
                f"lo{pct}": self.lower,
                f"hi{pct}": self.upper,
                "avg_stratum_fraction": float(np.nanmean(self.stratum_fraction)),
            }
        )


@dataclass
class EffectSummary:
    t1: float
    t0: float
    mean: float
    lower: float
    upper: float
    values: np.ndarray
    level: float = 0.95


def _trajectories(
    mediator: MediatorState,
    data: Dataset,
    spec: ModelSpec,
    units: np.ndarray,
    n_mc: int,
    membership: str,
    chol: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Fresh trajectories S(t_1..t_M) given X for the listed units, shape (len(units), n_mc, M)"""
    clusters = mediator.clusters
    phi_grid = clusters.xi @ spec.basis.design(data.grid).T
    if membership == "mixture":
        labels = rng.choice(clusters.n_clusters, size=(len(units), n_mc), p=clusters.pi / clusters.pi.sum())
    else:
        labels = np.broadcast_to(clusters.z[units][:, None], (len(units), n_mc))
    xa = data.mediator_design[units] @ mediator.alpha
    normals = rng.standard_normal((len(units), n_mc, data.m))
    return phi_grid[labels] + xa[:, None, None] + normals @ chol.T


def _unit_values(outcome: OutcomeState, data: Dataset, spec: ModelSpec, units: np.ndarray, s_bar: np.ndarray, t_query: np.ndarray) -> np.ndarray:
    """E[Y(t) | X_i, S = s] averaged over trajectories; linear in s, so the trajectory mean suffices"""
    return outcome_means(t_query, s_bar, data.x[units], outcome, spec, data.grid)


def _draw_setup(draws, data: Dataset, b: int, seed: int):
    rng = stream(seed, BLOCK_ESTIMAND, b)
    weights = rng.dirichlet(np.ones(data.n))
    mediator = draws.mediator(b)
    chol = stable_cholesky(kernel_cov(data.grid, mediator.kernel), mediator.kernel.sigma_s2, label="trajectory covariance")
    return rng, weights, mediator, draws.outcome(b), chol


def _check_args(draws, data: Dataset, n_mc: int, membership: str):
    if n_mc < 1:
        raise InvalidInputError("n_mc must be >= 1")
    if membership not in ("unit", "mixture"):
        raise InvalidInputError(f"membership must be 'unit' or 'mixture' (got {membership!r})")
    if draws.n_draws == 0:
        raise InvalidInputError("no retained draws")
    if draws.aug.shape[1:] != (data.n, data.m):
        raise InvalidInputError("draws were not produced from this dataset")


def stratum_curve_draws(
    draws,
    data: Dataset,
    stratum: StratumSpec,
    t_query: np.ndarray,
    n_mc: int = 200,
    seed: int = 1,
    membership: str = "unit",
    escalation: int = 5,
    progress: bool = False,
):
    """
    Per-draw stratum curves, shape (B, len(t_query)); draws with an empty stratum are NaN.

    Returns (values, stratum_fraction, n_unresolved).
    """
    _check_args(draws, data, n_mc, membership)
    spec = draws.model_spec(data)
    t_query = np.atleast_1d(np.asarray(t_query, dtype=float))
    values = np.full((draws.n_draws, len(t_query)), np.nan)
    fraction = np.zeros(draws.n_draws)
    n_unresolved = 0

    for b in tqdm(range(draws.n_draws), desc="estimand", disable=not progress):
        rng, weights, mediator, outcome, chol = _draw_setup(draws, data, b, seed)
        all_units = np.arange(data.n)
        traj = _trajectories(mediator, data, spec, all_units, n_mc, membership, chol, rng)

        flagged = np.flatnonzero(stratum.contains(draws.aug[b]))
        fraction[b] = len(flagged) / data.n
        if flagged.size == 0:
            continue

        inside = stratum.contains(traj[flagged])
        counts = inside.sum(axis=1)
        sums = np.einsum("uk,ukm->um", inside.astype(float), traj[flagged])

        retry = np.flatnonzero(counts == 0)
        if retry.size:
            extra = _trajectories(mediator, data, spec, flagged[retry], n_mc * escalation, membership, chol, rng)
            extra_inside = stratum.contains(extra)
            counts[retry] = extra_inside.sum(axis=1)
            sums[retry] = np.einsum("uk,ukm->um", extra_inside.astype(float), extra)
            logger.debug("draw %d: escalated Monte Carlo for %d units", b, retry.size)

        ok = counts > 0
        n_unresolved += int(np.count_nonzero(~ok))
        if not ok.any():
            continue
        units = flagged[ok]
        s_bar = sums[ok] / counts[ok][:, None]
        unit_vals = _unit_values(outcome, data, spec, units, s_bar, t_query)
        w = weights[units]
        values[b] = w @ unit_vals / w.sum()

    if n_unresolved:
        logger.warning("%d unit-draws had no accepted trajectories after escalation and were dropped", n_unresolved)
    return values, fraction, n_unresolved


def _summarize(t_query, values, fraction, n_unresolved, level, what) -> PsCurve:
    valid = ~np.isnan(values).any(axis=1)
    n_missing = int(np.count_nonzero(~valid))
    if not valid.any():
        raise EmptyStratumError(f"{what}: no retained draw has a unit in the stratum")
    if n_missing:
        logger.warning("%s: %d of %d draws had an empty stratum", what, n_missing, len(values))
    kept = values[valid]
    tail = 0.5 * (1.0 - level)
    mean = kept.mean(axis=0)
    lower = np.quantile(kept, tail, axis=0)
    upper = np.quantile(kept, 1.0 - tail, axis=0)
    outside = (mean < lower) | (mean > upper)
    if outside.any():
        logger.warning(
            "%s: posterior mean outside the %g%% interval at %d points; interval widened", what, 100 * level, int(outside.sum())
        )
    return PsCurve(
        t=np.asarray(t_query, dtype=float),
        mean=mean,
        lower=np.minimum(lower, mean),
        upper=np.maximum(upper, mean),
        stratum_fraction=fraction,
        values=values,
        level=level,
        n_missing=n_missing,
        n_unresolved=n_unresolved,
    )


def pce_curve(
    draws,
    data: Dataset,
    stratum: StratumSpec,
    t_query: Optional[Sequence[float]] = None,
    n_mc: int = 200,
    seed: int = 1,
    membership: str = "unit",
    escalation: int = 5,
    level: float = 0.95,
    progress: bool = False,
) -> PsCurve:
    """E[Y(t) | a < g(S) < b] over t_query (the grid by default)"""
    t_query = data.grid if t_query is None else np.atleast_1d(np.asarray(t_query, dtype=float))
    values, fraction, unresolved = stratum_curve_draws(
        draws, data, stratum, t_query, n_mc, seed, membership, escalation, progress
    )
    return _summarize(t_query, values, fraction, unresolved, level, stratum.label)


def treatment_effect(
    draws,
    data: Dataset,
    stratum: StratumSpec,
    t1: float,
    t0: float,
    n_mc: int = 200,
    seed: int = 1,
    membership: str = "unit",
    escalation: int = 5,
    level: float = 0.95,
) -> EffectSummary:
    """E[Y(t1) - Y(t0) | stratum], differenced inside each draw"""
    values, _, _ = stratum_curve_draws(draws, data, stratum, [t1, t0], n_mc, seed, membership, escalation)
    diff = values[:, 0] - values[:, 1]
    summary = _summarize([t1 - t0], diff[:, None], np.zeros(len(diff)), 0, level, stratum.label)
    return EffectSummary(
        t1=float(t1),
        t0=float(t0),
        mean=float(summary.mean[0]),
        lower=float(summary.lower[0]),
        upper=float(summary.upper[0]),
        values=diff,
        level=level,
    )


def dose_response_curve(
    draws,
    data: Dataset,
    t_query: Optional[Sequence[float]] = None,
    n_mc: int = 200,
    seed: int = 1,
    membership: str = "unit",
    level: float = 0.95,
) -> PsCurve:
    """Unconditional E[Y(t)], averaging every trajectory of every unit under Bayesian-bootstrap weights"""
    _check_args(draws, data, n_mc, membership)
    spec = draws.model_spec(data)
    t_query = data.grid if t_query is None else np.atleast_1d(np.asarray(t_query, dtype=float))
    values = np.empty((draws.n_draws, len(t_query)))
    all_units = np.arange(data.n)
    for b in range(draws.n_draws):
        rng, weights, mediator, outcome, chol = _draw_setup(draws, data, b, seed)
        traj = _trajectories(mediator, data, spec, all_units, n_mc, membership, chol, rng)
        unit_vals = _unit_values(outcome, data, spec, all_units, traj.mean(axis=1), t_query)
        values[b] = weights @ unit_vals / weights.sum()
    return _summarize(t_query, values, np.ones(draws.n_draws), 0, level, "dose-response")


def phi_curves(draws, data: Dataset) -> np.ndarray:
    """Posterior mean of each unit's treatment-mediator curve phi_{z_i}(t) on the grid, shape (n, M)"""
    spec = draws.model_spec(data)
    basis_grid = spec.basis.design(data.grid)
    total = np.zeros((data.n, data.m))
    for b in range(draws.n_draws):
        total += draws.xi[b][draws.z[b]] @ basis_grid.T
    return total / max(draws.n_draws, 1)


def cluster_phi_summary(phi: np.ndarray, groups: np.ndarray, grid: np.ndarray) -> pd.DataFrame:
    """Average phi curve per group (rows) at each grid point (columns)"""
    frame = pd.DataFrame(phi, columns=[f"{t:.6g}" for t in grid])
    frame["group"] = np.asarray(groups)
    return frame.groupby("group").mean()
