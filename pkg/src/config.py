"""Configuration - JSON file deep-merged over defaults, flags applied last"""

import copy
import json
import math
from pathlib import Path
from typing import Any, Optional

from .errors import ConfigError

SCHEMA_VERSION = 1


class Config:
    """Run configuration"""

    DEFAULT_CONFIG = {
        "model": {
            "n_basis": 5,
            "intercept": True,
            "truncation": 20,
            "lambda_basis": "spline",
            "lambda_size": 4,
            "beta_form": "linear",
        },
        "priors": {
            "alpha_var": 100.0,
            "xi_mean": 0.0,
            "xi_var": 25.0,
            "sigma_s2_a": 1.0,
            "sigma_s2_b": 1.0,
            "rho_shape": 2.0,
            "rho_rate": 0.5,
            "kappa_shape": 1.0,
            "kappa_rate": 1.0,
            "delta_var": 100.0,
            "gamma_var": 100.0,
            "zeta_var": 100.0,
            "sigma2_a": 1.0,
            "sigma2_b": 1.0,
        },
        "mcmc": {
            "n_iter": 10000,
            "n_burn": 2000,
            "thin": 8,
            "seed": 1,
            "n_chains": 1,
            "rho_step": None,
            "accept_low": 0.30,
            "accept_high": 0.40,
            "adapt_every": 50,
            "min_units": 10,
            "atom_sweeps": 5,
            "progress": True,
        },
        "grid": {
            "lower": None,
            "upper": None,
            "size": 10,
            "points": None,
        },
        "estimands": {
            "n_mc": 200,
            "escalation": 5,
            "level": 0.95,
            "membership": "unit",
            "seed": 1,
        },
        "output": {
            "dir": "output",
            "log_file": "psc_log.txt",
            "log_level": "INFO",
        },
    }

    CHOICES = {
        "model.lambda_basis": ("spline", "polynomial"),
        "model.beta_form": ("linear", "quadratic"),
        "estimands.membership": ("unit", "mixture"),
    }

    def __init__(self, config_path: Optional[str] = None, overrides: Optional[dict] = None):
        self.config_path = Path(config_path) if config_path else None
        self._config = copy.deepcopy(self.DEFAULT_CONFIG)
        if self.config_path is not None:
            self.load()
        if overrides:
            self.apply_overrides(overrides)
        self.validate()

    def load(self):
        """Load configuration from file"""
        if not self.config_path.exists():
            raise ConfigError(f"config file not found: {self.config_path}")
        try:
            with open(self.config_path, "r", encoding="utf-8") as f:
                loaded = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {self.config_path} is not valid JSON: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError("config file must contain a JSON object")
        # Sidecar metadata written by our own tools is tolerated
        loaded.pop("schema_version", None)
        self._deep_merge(self._config, loaded, "")

    def save(self, path: str):
        """Save the fully resolved configuration"""
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, ensure_ascii=False, indent=2)

    def _deep_merge(self, base: dict, update: dict, prefix: str):
        """Deep merge update into base, rejecting unknown keys"""
        for key, value in update.items():
            dotted = f"{prefix}{key}"
            if key not in base:
                raise ConfigError(f"unknown config key: {dotted}")
            if isinstance(base[key], dict):
                if not isinstance(value, dict):
                    raise ConfigError(f"config key {dotted} must be an object")
                self._deep_merge(base[key], value, dotted + ".")
            else:
                base[key] = self._coerce(dotted, base[key], value)

    def _coerce(self, dotted: str, default: Any, value: Any) -> Any:
        if default is None or value is None:
            return value
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"config key {dotted} must be true or false")
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
                raise ConfigError(f"config key {dotted} must be an integer")
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"config key {dotted} must be a number")
            return float(value)
        if isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"config key {dotted} must be a string")
        return value

    def apply_overrides(self, overrides: dict):
        """Apply dotted-key overrides such as {"mcmc.n_iter": 500}; flags win over the file"""
        for dotted, value in overrides.items():
            if value is None:
                continue
            section, _, key = dotted.partition(".")
            if section not in self._config or key not in self._config[section]:
                raise ConfigError(f"unknown config key: {dotted}")
            self._config[section][key] = self._coerce(dotted, self.DEFAULT_CONFIG[section][key], value)

    def validate(self):
        """Check value ranges that the samplers rely on"""
        for dotted, allowed in self.CHOICES.items():
            section, key = dotted.split(".")
            if self._config[section][key] not in allowed:
                raise ConfigError(f"config key {dotted} must be one of {allowed}")

        mcmc = self._config["mcmc"]
        if mcmc["thin"] < 1:
            raise ConfigError("mcmc.thin must be >= 1")
        if not 0 <= mcmc["n_burn"] < mcmc["n_iter"]:
            raise ConfigError("mcmc.n_burn must satisfy 0 <= n_burn < n_iter")
        if mcmc["n_chains"] < 1:
            raise ConfigError("mcmc.n_chains must be >= 1")
        if mcmc["rho_step"] is not None and not mcmc["rho_step"] > 0:
            raise ConfigError("mcmc.rho_step must be positive")

        for key, value in self._config["priors"].items():
            if key != "xi_mean" and not (math.isfinite(value) and value > 0):
                raise ConfigError(f"priors.{key} must be a positive number")

        model = self._config["model"]
        if model["n_basis"] < 1 or model["truncation"] < 2 or model["lambda_size"] < 1:
            raise ConfigError("model.n_basis >= 1, model.truncation >= 2 and model.lambda_size >= 1 are required")

        est = self._config["estimands"]
        if est["n_mc"] < 1 or est["escalation"] < 1 or not 0 < est["level"] < 1:
            raise ConfigError("estimands.n_mc >= 1, estimands.escalation >= 1, 0 < estimands.level < 1 are required")

        grid = self._config["grid"]
        if grid["points"] is not None:
            points = grid["points"]
            if not isinstance(points, list) or len(points) < 1:
                raise ConfigError("grid.points must be a non-empty list")
            if any(b <= a for a, b in zip(points, points[1:])):
                raise ConfigError("grid.points must be strictly increasing")
        elif grid["size"] < 1:
            raise ConfigError("grid.size must be >= 1")

    def to_dict(self) -> dict:
        """Fully resolved configuration, defaults materialized"""
        resolved = copy.deepcopy(self._config)
        resolved["schema_version"] = SCHEMA_VERSION
        return resolved

    def section(self, name: str) -> dict:
        return dict(self._config[name])

    # Sections
    @property
    def model(self) -> dict:
        return self.section("model")

    @property
    def priors(self) -> dict:
        return self.section("priors")

    @property
    def mcmc(self) -> dict:
        return self.section("mcmc")

    @property
    def grid(self) -> dict:
        return self.section("grid")

    @property
    def estimands(self) -> dict:
        return self.section("estimands")

    # Output settings
    @property
    def output_dir(self) -> str:
        return self._config["output"]["dir"]

    @output_dir.setter
    def output_dir(self, value: str):
        self._config["output"]["dir"] = value

    @property
    def log_file(self) -> str:
        return self._config["output"]["log_file"]

    @property
    def log_level(self) -> str:
        return self._config["output"]["log_level"]
