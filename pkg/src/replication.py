"""Replicated simulation studies - bias, rho recovery and cluster separation tables"""

import copy
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from .config import Config
from .draw_store import write_table
from .errors import ConfigError, EmptyStratumError
from .estimands import cluster_phi_summary, phi_curves, treatment_effect
from .gibbs_engine import run_chain
from .rho_diagnostics import rho_posterior_study
from .simgen import Scenario, default_targets, generate, oracle_truth

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StudyDesign:
    n: int
    rho_stars: Sequence[float] = (3.0, 8.0)
    c_values: Sequence[float] = (0.0, 0.5, 1.0)
    misspecified: bool = False


STUDIES: Dict[str, StudyDesign] = {
    "s5": StudyDesign(n=500),
    "s5-misspecified": StudyDesign(n=500, misspecified=True),
    "large-n": StudyDesign(n=1000),
}
RHO_STUDY = "rho-marginal"


def study_names() -> List[str]:
    return sorted(STUDIES) + [RHO_STUDY]


def _fit_config(base: Config, grid: np.ndarray) -> Config:
    config = copy.deepcopy(base)
    config.apply_overrides({"grid.points": [float(t) for t in grid], "mcmc.progress": False})
    return config


def clusters_ordered(phi: np.ndarray, true_cluster: np.ndarray, grid: np.ndarray) -> bool:
    """True when the group-averaged phi at the last grid point increases with the true cluster index"""
    summary = cluster_phi_summary(phi, true_cluster, grid)
    last = summary.iloc[:, -1].sort_index().to_numpy()
    return bool(np.all(np.diff(last) > 0))


def run_replicate(scenario: Scenario, base: Config) -> dict:
    """Fit one simulated dataset and collect its estimates"""
    data, truth = generate(scenario)
    config = _fit_config(base, data.grid)
    draws = run_chain(data, config)
    est = config.estimands
    estimates = {}
    for target in default_targets():
        try:
            effect = treatment_effect(
                draws,
                data,
                target.stratum,
                target.t1,
                target.t0,
                n_mc=est["n_mc"],
                seed=est["seed"],
                membership=est["membership"],
                escalation=est["escalation"],
                level=est["level"],
            )
            estimates[target.name] = effect.mean
        except EmptyStratumError as e:
            logger.warning("seed %d: %s", scenario.seed, e)
            estimates[target.name] = np.nan
    phi = phi_curves(draws, data)
    return {
        "estimates": estimates,
        "rho_mean": float(np.mean(draws.rho)),
        "ordered": clusters_ordered(phi, truth.cluster, data.grid),
    }


def run_study(name: str, config: Config, n_reps: int = 50, seed: int = 1, n_pop: int = 1_000_000) -> Dict[str, pd.DataFrame]:
    """Run a named study; returns its tables keyed by table name (bias, rho, clusters, replicates)"""
    if name == RHO_STUDY:
        curves, summary = rho_posterior_study(n=500, n_reps=n_reps, seed=seed)
        return {"rho_curves": curves, "rho_summary": summary}
    if name not in STUDIES:
        raise ConfigError(f"unknown study {name!r}; choose from {study_names()}")
    design = STUDIES[name]

    bias_rows, rho_rows, cluster_rows, replicate_rows = [], [], [], []
    cells = [(r, c) for r in design.rho_stars for c in design.c_values]
    for rho_star, c in cells:
        cell = dict(n=design.n, rho_star=rho_star, c=c, misspecified=design.misspecified)
        truth = oracle_truth(Scenario(seed=seed, **cell), n_pop=n_pop).set_index("estimand")["value"]
        results = [
            run_replicate(Scenario(seed=seed + rep, **cell), config)
            for rep in tqdm(range(n_reps), desc=f"{name} rho*={rho_star:g} c={c:g}")
        ]

        for estimand, true_value in truth.items():
            est = np.array([r["estimates"][estimand] for r in results])
            est = est[~np.isnan(est)]
            bias = est - true_value
            bias_rows.append(
                {
                    "rho_star": rho_star,
                    "c": c,
                    "estimand": estimand,
                    "truth": true_value,
                    "median_bias": float(np.median(bias)) if bias.size else np.nan,
                    "mean_bias": float(np.mean(bias)) if bias.size else np.nan,
                    "sd_estimate": float(np.std(est, ddof=1)) if est.size > 1 else np.nan,
                    "n_replicates": int(est.size),
                }
            )
        replicate_rows.extend(
            {"rho_star": rho_star, "c": c, "seed": seed + rep, "rho_mean": r["rho_mean"], "ordered": r["ordered"]}
            for rep, r in enumerate(results)
        )
        rho_means = np.array([r["rho_mean"] for r in results])
        rho_rows.append(
            {
                "rho_star": rho_star,
                "c": c,
                "median_rho": float(np.median(rho_means)),
                "mean_rho": float(np.mean(rho_means)),
                "sd_rho": float(np.std(rho_means, ddof=1)) if n_reps > 1 else np.nan,
                "frac_below_truth": float(np.mean(rho_means < rho_star)),
                "n_replicates": n_reps,
            }
        )
        cluster_rows.append(
            {
                "rho_star": rho_star,
                "c": c,
                "n_ordered": int(sum(r["ordered"] for r in results)),
                "n_replicates": n_reps,
            }
        )
        logger.info("%s cell rho*=%g c=%g done", name, rho_star, c)

    return {
        "bias": pd.DataFrame(bias_rows),
        "rho": pd.DataFrame(rho_rows),
        "clusters": pd.DataFrame(cluster_rows),
        "replicates": pd.DataFrame(replicate_rows),
    }


def write_report(name: str, tables: Dict[str, pd.DataFrame], out_dir: str, config: dict) -> List[str]:
    paths = []
    for table, frame in tables.items():
        path = str(Path(out_dir) / f"{name}_{table}.csv")
        write_table(path, frame, config)
        paths.append(path)
    return paths
