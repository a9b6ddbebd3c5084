import numpy as np
import pytest

from stopgame.game import GameConfig
from stopgame.observation import ObservationModel, gaussian_model


def random_tp2(rng, n):
    """Random TP-2 pair: f1 is f0 tilted by an increasing likelihood ratio."""
    f0 = rng.dirichlet(np.ones(n))
    ratio = np.sort(rng.lognormal(0.0, 1.5, n))
    f1 = f0 * ratio
    return ObservationModel(f0, f1 / f1.sum())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def desk():
    return GameConfig(L=3), gaussian_model(2.5, 6.5, 1.5, 10)


@pytest.fixture
def binary_obs():
    return ObservationModel([0.8, 0.2], [0.2, 0.8])


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
