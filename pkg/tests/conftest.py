import numpy as np
import pytest

from src.core_model import Dataset
from src.gibbs_engine import run_chain
from src.simgen import Scenario, generate

from .helpers import tiny_config


@pytest.fixture
def small_dataset() -> Dataset:
    """Five units, one covariate, treatments kept away from the grid"""
    return Dataset(
        y=np.array([0.4, -0.2, 1.1, 0.3, 0.8]),
        s_obs=np.array([0.5, -0.4, 1.2, 0.1, 0.9]),
        t_obs=np.array([0.5, -0.5, 0.25, -0.25, 0.75]),
        x=np.array([[0.3], [-1.0], [0.8], [0.1], [-0.6]]),
        grid=np.array([-1.0, 0.0, 1.0]),
    )


@pytest.fixture(scope="session")
def simulated():
    return generate(Scenario(n=40, p=2, c=0.5, seed=3))


@pytest.fixture(scope="session")
def tiny_draws(simulated):
    data, _ = simulated
    return data, run_chain(data, tiny_config())
