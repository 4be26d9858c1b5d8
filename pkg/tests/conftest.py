import numpy as np
import pytest

from magimu import so3
from magimu.sim import SimConfig, simulate


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_rotation(rng, max_angle=np.pi * 0.95):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return so3.exp_map(axis * rng.uniform(0.0, max_angle))


@pytest.fixture(scope="session")
def short_noiseless():
    """One minute of noiseless data at 80 Hz."""
    return simulate(SimConfig(seed=7, duration_s=60.0, noise_free=True))


@pytest.fixture(scope="session")
def short_noisy():
    cfg = SimConfig(seed=8, duration_s=60.0)
    dataset, truth = simulate(cfg)
    return dataset, truth, cfg.noise()


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
