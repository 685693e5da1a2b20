import numpy as np

from src.config import Config
from src.core_model import KernelParams, LambdaBasis, ModelSpec, MonotoneBasis, Priors
from src.mediator_sampler import ClusterState, MediatorState, stick_breaking


def tiny_config(**extra) -> Config:
    overrides = {
        "model.truncation": 5,
        "mcmc.n_iter": 20,
        "mcmc.n_burn": 10,
        "mcmc.thin": 2,
        "mcmc.progress": False,
        "mcmc.min_units": 5,
        "estimands.n_mc": 20,
    }
    overrides.update(extra)
    return Config(overrides=overrides)


def flat_mediator(n: int, n_coef: int, alpha, rho: float = 1.0, sigma_s2: float = 1.0, n_clusters: int = 3) -> MediatorState:
    """Every unit in the pinned flat cluster"""
    v = np.full(n_clusters, 0.5)
    v[-1] = 1.0
    clusters = ClusterState(
        z=np.zeros(n, dtype=int),
        xi=np.zeros((n_clusters, n_coef)),
        v=v,
        pi=stick_breaking(v),
        kappa=1.0,
    )
    return MediatorState(KernelParams(rho, sigma_s2), np.asarray(alpha, dtype=float), clusters)


def simple_spec(t_obs, **priors) -> ModelSpec:
    return ModelSpec(
        basis=MonotoneBasis.from_treatments(t_obs, 3),
        lambda_basis=LambdaBasis.from_treatments(t_obs, "spline", 4),
        truncation=3,
        priors=Priors(**priors),
    )


