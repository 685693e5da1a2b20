import json

import pytest

from src.config import SCHEMA_VERSION, Config
from src.errors import ConfigError


def write_json(path, payload):
    path.write_text(json.dumps(payload), encoding="utf-8")
    return str(path)


def test_defaults():
    config = Config()
    assert config.mcmc["n_iter"] == 10000
    assert config.mcmc["n_burn"] == 2000
    assert config.mcmc["thin"] == 8
    assert config.priors["rho_shape"] == 2.0 and config.priors["rho_rate"] == 0.5
    assert config.grid["size"] == 10
    assert config.output_dir == "output"
    assert config.to_dict()["schema_version"] == SCHEMA_VERSION


def test_file_is_deep_merged(tmp_path):
    path = write_json(tmp_path / "c.json", {"mcmc": {"n_iter": 500, "n_burn": 100}})
    config = Config(path)
    assert config.mcmc["n_iter"] == 500
    assert config.mcmc["thin"] == 8
    assert config.model["truncation"] == 20


def test_flags_win_over_file(tmp_path):
    path = write_json(tmp_path / "c.json", {"mcmc": {"seed": 3}})
    config = Config(path, overrides={"mcmc.seed": 9, "mcmc.thin": None})
    assert config.mcmc["seed"] == 9
    assert config.mcmc["thin"] == 8


@pytest.mark.parametrize(
    "payload",
    [{"mcmc": {"n_iters": 5}}, {"sampler": {}}, {"mcmc": 3}, {"mcmc": {"n_iter": "many"}}, {"mcmc": {"progress": 1}}],
)
def test_rejects_unknown_or_ill_typed_keys(tmp_path, payload):
    with pytest.raises(ConfigError):
        Config(write_json(tmp_path / "c.json", payload))


def test_rejects_unknown_override():
    with pytest.raises(ConfigError):
        Config(overrides={"mcmc.iterations": 5})


def test_missing_or_malformed_file(tmp_path):
    with pytest.raises(ConfigError):
        Config(str(tmp_path / "absent.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError):
        Config(str(bad))


def test_save_round_trip(tmp_path):
    config = Config(overrides={"model.truncation": 7, "grid.points": [-1.0, 0.0, 1.0]})
    path = tmp_path / "saved.json"
    config.save(str(path))
    assert Config(str(path)).to_dict() == config.to_dict()


def test_integer_valued_floats_are_accepted():
    assert Config(overrides={"mcmc.n_iter": 500.0, "mcmc.n_burn": 10}).mcmc["n_iter"] == 500
    with pytest.raises(ConfigError):
        Config(overrides={"mcmc.n_iter": 500.5})


@pytest.mark.parametrize(
    "overrides",
    [
        {"mcmc.n_burn": 10000},
        {"mcmc.thin": 0},
        {"mcmc.n_chains": 0},
        {"mcmc.rho_step": -1.0},
        {"priors.xi_var": 0.0},
        {"model.truncation": 1},
        {"estimands.level": 1.0},
        {"grid.points": [0.0, 0.0]},
        {"model.beta_form": "cubic"},
        {"estimands.membership": "cluster"},
    ],
)
def test_rejects_degenerate_settings(overrides):
    with pytest.raises(ConfigError):
        Config(overrides=overrides)


def test_output_dir_setter():
    config = Config()
    config.output_dir = "elsewhere"
    assert config.to_dict()["output"]["dir"] == "elsewhere"
