"""Command-line application - simulate, fit, estimate, validate-rho, replicate"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd

from . import __version__
from .config import SCHEMA_VERSION, Config
from .core_model import Dataset, make_grid
from .draw_store import read_dataset, read_draw_log, write_dataset, write_table
from .errors import ConfigError, InvalidInputError, PscError, SchemaError
from .estimands import StratumSpec, dose_response_curve, pce_curve, treatment_effect
from .gibbs_engine import PosteriorDraws, run_chains
from .logs import setup_logging
from .replication import run_study, study_names, write_report
from .rho_diagnostics import DEFAULT_RHO_GRID, derivative_check, rho_posterior_study, truth_grid_scan
from .simgen import Scenario, generate, oracle_truth

logger = logging.getLogger(__name__)

SCENARIOS = {
    "s5": dict(beta_mode="surface", misspecified=False),
    "s5-misspecified": dict(beta_mode="surface", misspecified=True),
    "rho": dict(beta_mode="constant", misspecified=False),
}

# CLI flag -> dotted config key
FLAG_KEYS = {
    "iters": "mcmc.n_iter",
    "burn": "mcmc.n_burn",
    "thin": "mcmc.thin",
    "seed": "mcmc.seed",
    "chains": "mcmc.n_chains",
    "out_dir": "output.dir",
    "n_mc": "estimands.n_mc",
    "membership": "estimands.membership",
    "log_level": "output.log_level",
}


def parse_threshold(token: str, s_obs: Optional[np.ndarray] = None) -> float:
    """A number, +-inf, or mean_s / sd_s for the observed mediator's mean / standard deviation"""
    token = token.strip()
    if token in ("mean_s", "sd_s"):
        if s_obs is None:
            raise InvalidInputError(f"threshold {token} needs the observed data (--data)")
        return float(np.mean(s_obs)) if token == "mean_s" else float(np.std(s_obs, ddof=1))
    try:
        return float(token)
    except ValueError as e:
        raise InvalidInputError(f"threshold must be a number, inf, -inf, mean_s or sd_s (got {token!r})") from e


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="psc", description="Principal stratification for continuous treatments")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="JSON configuration file")
    parser.add_argument("--log-level", dest="log_level", help="DEBUG, INFO, WARNING or ERROR")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="write a synthetic dataset with ground truth")
    sim.add_argument("--scenario", choices=sorted(SCENARIOS), default="s5")
    sim.add_argument("--n", type=int, default=500)
    sim.add_argument("--p", type=int, default=5)
    sim.add_argument("--c", type=float, default=0.0)
    sim.add_argument("--rho", type=float, default=3.0)
    sim.add_argument("--sigma-s2", dest="sigma_s2", type=float, default=1.0)
    sim.add_argument("--seed", type=int, default=1)
    sim.add_argument("--oracle", type=int, metavar="N_POP", help="also compute population truths with N_POP units")
    sim.add_argument("--out", required=True, help="dataset CSV path")

    fit = sub.add_parser("fit", help="run the Gibbs sampler on a dataset")
    fit.add_argument("data", help="CSV with columns y,s,t,x1..xp")
    fit.add_argument("--iters", type=int)
    fit.add_argument("--burn", type=int)
    fit.add_argument("--thin", type=int)
    fit.add_argument("--seed", type=int)
    fit.add_argument("--chains", type=int)
    fit.add_argument("--out-dir", dest="out_dir")
    fit.add_argument("--no-progress", dest="progress", action="store_false", default=None)

    est = sub.add_parser("estimate", help="principal-strata curves from draw logs")
    est.add_argument("drawlogs", nargs="+")
    est.add_argument("--data", required=True, help="dataset the draws were fitted on")
    est.add_argument("--g", default="range", choices=["range", "mean", "avg_abs_deriv"])
    est.add_argument("--a", default="-inf")
    est.add_argument("--b", default="inf")
    est.add_argument("--t1", type=float)
    est.add_argument("--t0", type=float)
    est.add_argument("--n-mc", dest="n_mc", type=int)
    est.add_argument("--membership", choices=["unit", "mixture"])
    est.add_argument("--dose-response", dest="dose_response", action="store_true")
    est.add_argument("--out", required=True, help="curve CSV path")

    val = sub.add_parser("validate-rho", help="marginal-posterior diagnostics for rho")
    val.add_argument("--n-values", dest="n_values", type=int, nargs="+", default=[200, 800, 3200])
    val.add_argument("--rho", type=float, default=3.0)
    val.add_argument("--c", type=float, default=0.25)
    val.add_argument("--seed", type=int, default=1)
    val.add_argument("--misspecified", action="store_true")
    val.add_argument("--study", action="store_true", help="also run the replicated averaged-posterior study")
    val.add_argument("--reps", type=int, default=100)
    val.add_argument("--out-dir", dest="out_dir")

    rep = sub.add_parser("replicate", help="replicated simulation study")
    rep.add_argument("study", choices=study_names())
    rep.add_argument("--reps", type=int, default=50)
    rep.add_argument("--seed", type=int, default=1)
    rep.add_argument("--n-pop", dest="n_pop", type=int, default=1_000_000)
    rep.add_argument("--iters", type=int)
    rep.add_argument("--burn", type=int)
    rep.add_argument("--thin", type=int)
    rep.add_argument("--out-dir", dest="out_dir")
    return parser


class PscApp:
    """Main application class"""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        overrides = {key: getattr(args, flag, None) for flag, key in FLAG_KEYS.items()}
        # replicate's --seed seeds the scenarios, not the chains
        if args.command in ("simulate", "validate-rho", "replicate"):
            overrides.pop("mcmc.seed")
        if getattr(args, "progress", None) is not None:
            overrides["mcmc.progress"] = args.progress
        self.config = Config(args.config, overrides)
        self.out_dir = Path(self.config.output_dir)
        self.log_path = setup_logging(str(self.out_dir / self.config.log_file), self.config.log_level)

    def _grid_for(self, t_obs: np.ndarray) -> np.ndarray:
        grid = self.config.grid
        return make_grid(t_obs, grid["lower"], grid["upper"], grid["size"], grid["points"])

    def cmd_simulate(self) -> List[str]:
        args = self.args
        scenario = Scenario(
            n=args.n, p=args.p, rho_star=args.rho, c=args.c, seed=args.seed, sigma_s2=args.sigma_s2,
            **SCENARIOS[args.scenario],
        )
        data, truth = generate(scenario)
        out = Path(args.out)
        stem = out.with_suffix("")
        write_dataset(str(out), data)

        # Sidecar config carries the grid so `fit --config` reproduces it
        sidecar = Config(overrides={"grid.points": [float(t) for t in data.grid]})
        sidecar.save(f"{stem}.config.json")
        with open(f"{stem}.truth.json", "w", encoding="utf-8") as f:
            json.dump({"schema_version": SCHEMA_VERSION, **truth.to_dict()}, f, indent=2)
        written = [str(out), f"{stem}.config.json", f"{stem}.truth.json"]

        if args.oracle:
            table = oracle_truth(scenario, n_pop=args.oracle)
            write_table(f"{stem}.oracle.csv", table, {"scenario": truth.to_dict()["scenario"]})
            written.append(f"{stem}.oracle.csv")
        logger.info("simulated %d units (%s, c=%g, rho*=%g)", data.n, args.scenario, args.c, args.rho)
        return written

    def cmd_fit(self) -> List[str]:
        # The data-driven grid needs t first; one placeholder point satisfies validation
        raw = read_dataset(self.args.data, np.zeros(1))
        data = Dataset(y=raw.y, s_obs=raw.s_obs, t_obs=raw.t_obs, x=raw.x, grid=self._grid_for(raw.t_obs))
        draws = run_chains(data, self.config, str(self.out_dir))
        combined = PosteriorDraws.concatenate(draws)
        logger.info(
            "fit done: %d draws over %d chains, rho acceptance %.2f, posterior mean rho %.3g",
            combined.n_draws,
            len(draws),
            combined.acceptance_rate,
            float(np.mean(combined.rho)) if combined.n_draws else float("nan"),
        )
        return sorted(str(p) for p in self.out_dir.glob("chain*"))

    def cmd_estimate(self) -> List[str]:
        args = self.args
        draws = PosteriorDraws.concatenate([read_draw_log(p) for p in args.drawlogs])
        if draws.grid.size == 0:
            raise SchemaError(f"{args.drawlogs[0]} does not record its treatment grid")
        data = read_dataset(args.data, draws.grid)
        est = self.config.estimands
        common = dict(n_mc=est["n_mc"], seed=est["seed"], membership=est["membership"])
        written = []

        if args.dose_response:
            curve = dose_response_curve(draws, data, level=est["level"], **common)
        else:
            stratum = StratumSpec(args.g, parse_threshold(args.a, data.s_obs), parse_threshold(args.b, data.s_obs))
            curve = pce_curve(draws, data, stratum, escalation=est["escalation"], level=est["level"], **common)
            if args.t1 is not None and args.t0 is not None:
                effect = treatment_effect(
                    draws, data, stratum, args.t1, args.t0, escalation=est["escalation"], level=est["level"], **common
                )
                effect_path = str(Path(args.out).with_suffix("")) + ".effect.csv"
                frame = _effect_frame(effect, stratum)
                write_table(effect_path, frame, draws.config)
                written.append(effect_path)
                logger.info(
                    "E[Y(%g) - Y(%g) | %s] = %.4g [%.4g, %.4g]",
                    args.t1, args.t0, stratum.label, effect.mean, effect.lower, effect.upper,
                )
        write_table(args.out, curve.to_frame(), draws.config)
        written.insert(0, args.out)
        return written

    def cmd_validate_rho(self) -> List[str]:
        args = self.args
        out_dir = Path(args.out_dir) if args.out_dir else self.out_dir
        echo = {"rho_star": args.rho, "c": args.c, "seed": args.seed, "misspecified": args.misspecified}
        table = derivative_check(args.n_values, args.rho, args.c, args.seed, args.misspecified)
        written = [str(out_dir / "rho_derivative.csv")]
        write_table(written[0], table, echo)

        scenario = Scenario(
            n=args.n_values[0], rho_star=args.rho, c=args.c, seed=args.seed,
            misspecified=args.misspecified, beta_mode="surface" if args.misspecified else "constant",
        )
        data, truth = generate(scenario)
        written.append(str(out_dir / "rho_grid.csv"))
        write_table(written[-1], truth_grid_scan(DEFAULT_RHO_GRID, data, truth), echo)

        if args.study:
            curves, summary = rho_posterior_study(n=args.n_values[0], rho_star=args.rho, n_reps=args.reps, seed=args.seed)
            for name, frame in (("rho_study_curves", curves), ("rho_study_summary", summary)):
                written.append(str(out_dir / f"{name}.csv"))
                write_table(written[-1], frame, echo)
        return written

    def cmd_replicate(self) -> List[str]:
        args = self.args
        tables = run_study(args.study, self.config, n_reps=args.reps, seed=args.seed, n_pop=args.n_pop)
        out_dir = args.out_dir or self.config.output_dir
        return write_report(args.study, tables, out_dir, self.config.to_dict())

    def run(self) -> int:
        """Run the selected subcommand"""
        handler = {
            "simulate": self.cmd_simulate,
            "fit": self.cmd_fit,
            "estimate": self.cmd_estimate,
            "validate-rho": self.cmd_validate_rho,
            "replicate": self.cmd_replicate,
        }[self.args.command]
        for path in handler():
            print(path)
        return 0


def _effect_frame(effect, stratum: StratumSpec) -> pd.DataFrame:
    pct = f"{100 * effect.level:g}"
    return pd.DataFrame(
        [
            {
                "stratum": stratum.label,
                "t1": effect.t1,
                "t0": effect.t0,
                "mean": effect.mean,
                f"lo{pct}": effect.lower,
                f"hi{pct}": effect.upper,
            }
        ]
    )


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point"""
    args = build_parser().parse_args(argv)
    try:
        app = PscApp(args)
        return app.run()
    except (SchemaError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except PscError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
