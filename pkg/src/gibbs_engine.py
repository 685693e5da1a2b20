"""Gibbs sampler with data augmentation - imputation, sweep order, chains and retained draws"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional

import numpy as np
from tqdm import tqdm

from . import rng as blocks
from .config import Config
from .core_model import (
    Dataset,
    KernelParams,
    ModelSpec,
    batch_conditional,
    conditional_cov,
    kernel_cov,
    psd_sqrt,
    unit_means,
)
from .errors import ConfigError, InvalidInputError, PscError
from .mediator_sampler import (
    ClusterState,
    MediatorState,
    RhoProposal,
    prior_atoms,
    stick_breaking,
    update_alpha,
    update_atoms,
    update_kappa,
    update_labels,
    update_rho,
    update_sigma_s2,
    update_stick_weights,
)
from .outcome_sampler import (
    OutcomeState,
    collapsed_outcome,
    mediator_features,
    n_beta_terms,
    update_delta,
    update_gamma,
    update_sigma2,
    update_zeta,
)
from .rng import ChainStreams

logger = logging.getLogger(__name__)


@dataclass
class AugmentedMediators:
    """Imputed S_i(t_m), shape (n, M)"""

    s: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.s)):
            raise InvalidInputError("imputed mediators contain non-finite values")


@dataclass(frozen=True)
class ChainConfig:
    n_iter: int = 10000
    n_burn: int = 2000
    thin: int = 8
    seed: int = 1
    n_chains: int = 1
    rho_step: Optional[float] = None
    accept_low: float = 0.30
    accept_high: float = 0.40
    adapt_every: int = 50
    min_units: int = 10
    atom_sweeps: int = 5
    progress: bool = True

    def __post_init__(self):
        if self.thin < 1:
            raise ConfigError("thin must be >= 1")
        if not 0 <= self.n_burn < self.n_iter:
            raise ConfigError(f"need 0 <= n_burn < n_iter (got n_burn={self.n_burn}, n_iter={self.n_iter})")
        if self.n_chains < 1:
            raise ConfigError("n_chains must be >= 1")

    @classmethod
    def from_config(cls, config: Config) -> "ChainConfig":
        return cls(**config.mcmc)

    @property
    def n_retained(self) -> int:
        return (self.n_iter - self.n_burn) // self.thin

    def is_retained(self, iteration: int) -> bool:
        return iteration >= self.n_burn and (iteration - self.n_burn + 1) % self.thin == 0


@dataclass
class PosteriorDraws:
    """Retained draws of one or more chains, stacked along the first axis"""

    rho: np.ndarray
    sigma_s2: np.ndarray
    alpha: np.ndarray
    xi: np.ndarray
    v: np.ndarray
    pi: np.ndarray
    z: np.ndarray
    kappa: np.ndarray
    delta: np.ndarray
    gamma: np.ndarray
    zeta: np.ndarray
    sigma2: np.ndarray
    aug: np.ndarray
    rho_accepted: np.ndarray
    log_target: np.ndarray
    config: dict = field(default_factory=dict)
    grid: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n_draws(self) -> int:
        return len(self.rho)

    def mediator(self, b: int) -> MediatorState:
        clusters = ClusterState(
            z=self.z[b].astype(int), xi=self.xi[b], v=self.v[b], pi=self.pi[b], kappa=float(self.kappa[b])
        )
        return MediatorState(KernelParams(float(self.rho[b]), float(self.sigma_s2[b])), self.alpha[b], clusters)

    def outcome(self, b: int) -> OutcomeState:
        return OutcomeState(self.delta[b], self.gamma[b], self.zeta[b], float(self.sigma2[b]))

    def model_spec(self, data: Dataset) -> ModelSpec:
        return ModelSpec.from_settings(self.config["model"], self.config["priors"], data.t_obs)

    @property
    def acceptance_rate(self) -> float:
        return float(np.mean(self.rho_accepted)) if self.n_draws else float("nan")

    @classmethod
    def concatenate(cls, parts: List["PosteriorDraws"]) -> "PosteriorDraws":
        from .draw_store import FIELDS

        if not parts:
            raise InvalidInputError("no draws to combine")
        stacked = {name: np.concatenate([getattr(p, name) for p in parts]) for name in FIELDS}
        return cls(**stacked, config=parts[0].config, grid=parts[0].grid)


def _snapshot(mediator: MediatorState, outcome: OutcomeState, aug: AugmentedMediators, accepted: bool, log_target: float) -> dict:
    c = mediator.clusters
    return {
        "rho": mediator.kernel.rho,
        "sigma_s2": mediator.kernel.sigma_s2,
        "alpha": mediator.alpha.copy(),
        "xi": c.xi.copy(),
        "v": c.v.copy(),
        "pi": c.pi.copy(),
        "z": c.z.copy(),
        "kappa": c.kappa,
        "delta": outcome.delta.copy(),
        "gamma": outcome.gamma.copy(),
        "zeta": outcome.zeta.copy(),
        "sigma2": outcome.sigma2,
        "aug": aug.s.copy(),
        "rho_accepted": float(accepted),
        "log_target": log_target,
    }


def _draws_from_snapshots(snapshots: List[dict], dims: dict, config: dict, grid: np.ndarray) -> PosteriorDraws:
    from .draw_store import FIELDS, field_shapes

    shapes = field_shapes(dims)
    arrays = {
        name: np.array([s[name] for s in snapshots], dtype=float).reshape((len(snapshots),) + shapes[name])
        for name in FIELDS
    }
    arrays["z"] = arrays["z"].astype(int)
    arrays["rho_accepted"] = arrays["rho_accepted"].astype(bool)
    return PosteriorDraws(**arrays, config=config, grid=np.asarray(grid, dtype=float))


def impute_mediators(
    state: MediatorState, outcome: OutcomeState, data: Dataset, spec: ModelSpec, rng: np.random.Generator
) -> AugmentedMediators:
    """Draw S_i(t_1..t_M) for every unit from its conditional given S_i, Y_i and all parameters"""
    kernel = state.kernel
    m_grid, m_obs = unit_means(data, state, spec.basis)
    mu_tilde, k = batch_conditional(data, kernel, m_grid, m_obs)
    sigma_tilde = conditional_cov(k, kernel_cov(data.grid, kernel), kernel.sigma_s2)
    beta, y_tilde = collapsed_outcome(outcome, data, spec)

    # Rank-one update of the GP conditional by the outcome
    sb = np.einsum("imk,ik->im", sigma_tilde, beta)
    var = outcome.sigma2 + np.maximum(np.einsum("im,im->i", beta, sb), 0.0)
    resid = y_tilde - np.einsum("im,im->i", beta, mu_tilde)
    mean = mu_tilde + sb * (resid / var)[:, None]
    cov = sigma_tilde - sb[:, :, None] * sb[:, None, :] / var[:, None, None]
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))

    # Jitter-free root keeps S_i(t_m) = S_i exactly when t_m = T_i
    root = psd_sqrt(cov, kernel.sigma_s2, label="imputation covariance")
    normals = rng.standard_normal((data.n, data.m))
    return AugmentedMediators(mean + np.einsum("imk,ik->im", root, normals))


@dataclass
class SweepResult:
    mediator: MediatorState
    outcome: OutcomeState
    aug: AugmentedMediators
    rho_accepted: bool
    log_target: float
    rho_flagged: bool = False


def sweep(
    mediator: MediatorState,
    outcome: OutcomeState,
    aug: AugmentedMediators,
    data: Dataset,
    spec: ModelSpec,
    streams: ChainStreams,
    iteration: int,
    rho_step: float,
    atom_sweeps: int = 5,
) -> SweepResult:
    """
    One full pass: rho, z, V, kappa, impute S, xi, alpha, sigma_s2, delta, gamma, zeta, sigma2.

    rho and z are drawn with S integrated out, so S is re-imputed before anything conditions on it.
    """
    mediator = mediator.copy()

    step = update_rho(mediator, data, outcome, spec, streams.block(iteration, blocks.BLOCK_RHO), rho_step)
    mediator.kernel = KernelParams(step.rho, mediator.kernel.sigma_s2)

    mediator.clusters.z = update_labels(mediator, data, outcome, spec, streams.block(iteration, blocks.BLOCK_LABELS))
    mediator.clusters.v, mediator.clusters.pi = update_stick_weights(
        mediator, streams.block(iteration, blocks.BLOCK_STICKS)
    )
    mediator.clusters.kappa = update_kappa(mediator, spec, streams.block(iteration, blocks.BLOCK_KAPPA))

    aug = impute_mediators(mediator, outcome, data, spec, streams.block(iteration, blocks.BLOCK_IMPUTE))

    mediator.clusters.xi = update_atoms(
        mediator, data, aug.s, spec, streams.block(iteration, blocks.BLOCK_ATOMS), sweeps=atom_sweeps
    )
    mediator.alpha = update_alpha(mediator, data, aug.s, spec, streams.block(iteration, blocks.BLOCK_ALPHA))
    sigma_s2 = update_sigma_s2(mediator, data, aug.s, spec, streams.block(iteration, blocks.BLOCK_SIGMA_S2))
    mediator.kernel = KernelParams(mediator.kernel.rho, sigma_s2)

    outcome = replace(
        outcome, delta=update_delta(outcome, data, aug.s, spec, streams.block(iteration, blocks.BLOCK_DELTA))
    )
    outcome = replace(
        outcome, gamma=update_gamma(outcome, data, aug.s, spec, streams.block(iteration, blocks.BLOCK_GAMMA))
    )
    outcome = replace(
        outcome, zeta=update_zeta(outcome, data, aug.s, spec, streams.block(iteration, blocks.BLOCK_ZETA))
    )
    outcome = replace(
        outcome, sigma2=update_sigma2(outcome, data, aug.s, spec, streams.block(iteration, blocks.BLOCK_SIGMA2))
    )
    return SweepResult(mediator, outcome, aug, step.accepted, step.log_target, step.flagged)


def initialize(data: Dataset, spec: ModelSpec, streams: ChainStreams):
    """Least-squares start with every unit in the flat cluster and rho at its prior mean"""
    rng = streams.block(0, blocks.BLOCK_INIT)
    design = data.mediator_design
    alpha = np.linalg.lstsq(design, data.s_obs, rcond=None)[0]
    sigma_s2 = max(float(np.var(data.s_obs - design @ alpha)), 1e-6)

    n_clusters = spec.truncation
    xi = np.zeros((n_clusters, spec.basis.n_coef))
    xi[1:] = prior_atoms(spec, n_clusters - 1, rng)
    kappa = spec.priors.kappa_shape / spec.priors.kappa_rate
    z = np.zeros(data.n, dtype=int)
    v = np.full(n_clusters, 0.5)
    v[-1] = 1.0
    clusters = ClusterState(z=z, xi=xi, v=v, pi=stick_breaking(v), kappa=kappa)
    mediator = MediatorState(KernelParams(spec.priors.rho_mean, sigma_s2), alpha, clusters)
    clusters.v, clusters.pi = update_stick_weights(mediator, rng)

    q = n_beta_terms(spec.beta_form)
    silent = OutcomeState(np.zeros(spec.lambda_basis.n_coef), np.zeros(data.p), np.zeros(q), 1.0)
    aug = impute_mediators(mediator, silent, data, spec, rng)

    lam = spec.lambda_basis.design(data.t_obs)
    w = mediator_features(aug.s, data, spec.beta_form)
    full = np.column_stack([lam, data.x, w])
    coef = np.linalg.lstsq(full, data.y, rcond=None)[0]
    j2, p = lam.shape[1], data.p
    sigma2 = max(float(np.var(data.y - full @ coef)), 1e-6)
    outcome = OutcomeState(coef[:j2], coef[j2 : j2 + p], coef[j2 + p :], sigma2)
    return mediator, outcome, aug


def _dims(data: Dataset, spec: ModelSpec) -> dict:
    return {
        "n": data.n,
        "m": data.m,
        "p": data.p,
        "c": spec.truncation,
        "j": spec.basis.n_coef,
        "j2": spec.lambda_basis.n_coef,
        "q": n_beta_terms(spec.beta_form),
    }


def resolved_config(config: Config, data: Dataset) -> dict:
    """Config echo with the grid actually used"""
    echo = config.to_dict()
    echo["grid"]["points"] = [float(t) for t in data.grid]
    return echo


def run_chain(data: Dataset, config: Config, chain: int = 0, out_dir: Optional[str] = None) -> PosteriorDraws:
    """
    Run one chain and return its retained draws.

    With `out_dir`, draws stream to chain<k>.drawlog and a summary CSV is written at the end.
    On failure the draws retained so far are flushed and attached to the error as `partial_draws`.
    """
    from .draw_store import DrawLogWriter, write_summary

    settings = ChainConfig.from_config(config)
    if data.n < settings.min_units:
        raise ConfigError(f"need at least {settings.min_units} units to fit (got {data.n})")
    spec = ModelSpec.from_settings(config.model, config.priors, data.t_obs)
    far = data.far_from_grid()
    if far.size:
        logger.warning("%d units have treatments more than one grid spacing from the grid", far.size)

    echo = resolved_config(config, data)
    dims = _dims(data, spec)
    streams = ChainStreams(settings.seed, chain)
    proposal = RhoProposal(
        settings.rho_step or 0.25 * spec.priors.rho_sd,
        settings.accept_low,
        settings.accept_high,
        settings.adapt_every,
    )

    log_ctx = nullcontext()
    if out_dir is not None:
        log_ctx = DrawLogWriter(str(Path(out_dir) / f"chain{chain}.drawlog"), dims, echo)

    snapshots: List[dict] = []
    n_flagged = 0
    iteration = 0
    try:
        with log_ctx as writer:
            mediator, outcome, aug = initialize(data, spec, streams)
            bar = tqdm(
                range(settings.n_iter),
                desc=f"chain {chain}",
                disable=not settings.progress,
                position=chain,
                leave=settings.n_chains == 1,
            )
            for iteration in bar:
                result = sweep(
                    mediator, outcome, aug, data, spec, streams, iteration + 1, proposal.step, settings.atom_sweeps
                )
                mediator, outcome, aug = result.mediator, result.outcome, result.aug
                proposal.record(result.rho_accepted)
                n_flagged += int(result.rho_flagged)

                if iteration < settings.n_burn:
                    proposal.adapt()
                    if iteration == settings.n_burn - 1:
                        logger.info(
                            "chain %d burn-in done: rho acceptance %.2f, step frozen at %.4g",
                            chain,
                            proposal.acceptance_rate,
                            proposal.step,
                        )
                elif settings.is_retained(iteration):
                    snap = _snapshot(mediator, outcome, aug, result.rho_accepted, result.log_target)
                    snapshots.append(snap)
                    if writer is not None:
                        writer.append(snap)
                bar.set_postfix(rho=f"{mediator.kernel.rho:.3g}", acc=f"{proposal.acceptance_rate:.2f}", refresh=False)
    except PscError as e:
        # the draw log is already closed here
        partial = _draws_from_snapshots(snapshots, dims, echo, data.grid)
        logger.error(
            "chain %d failed at iteration %d after %d retained draws: %s", chain, iteration, len(snapshots), e
        )
        if out_dir is not None:
            write_summary(str(Path(out_dir) / f"chain{chain}_summary.csv"), partial)
        e.partial_draws = partial
        raise

    if n_flagged:
        logger.warning("chain %d rejected %d rho proposals with a non-finite target", chain, n_flagged)
    logger.info(
        "chain %d finished: %d draws retained, rho acceptance %.2f", chain, len(snapshots), proposal.acceptance_rate
    )
    draws = _draws_from_snapshots(snapshots, dims, echo, data.grid)
    if out_dir is not None:
        write_summary(str(Path(out_dir) / f"chain{chain}_summary.csv"), draws)
    return draws


def thread_limit() -> int:
    """Worker cap from PSC_THREADS, defaulting to the CPU count"""
    value = os.environ.get("PSC_THREADS", "").strip()
    if value:
        try:
            limit = int(value)
        except ValueError as e:
            raise ConfigError(f"PSC_THREADS must be an integer (got {value!r})") from e
        if limit < 1:
            raise ConfigError("PSC_THREADS must be >= 1")
        return limit
    return os.cpu_count() or 1


def run_chains(data: Dataset, config: Config, out_dir: Optional[str] = None) -> List[PosteriorDraws]:
    """Independent chains 0..n_chains-1 in a thread pool; results come back in chain order"""
    n_chains = config.mcmc["n_chains"]
    workers = min(n_chains, thread_limit())
    if workers == 1:
        return [run_chain(data, config, chain, out_dir) for chain in range(n_chains)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run_chain, data, config, chain, out_dir) for chain in range(n_chains)]
        return [f.result() for f in futures]
