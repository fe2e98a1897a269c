import numpy as np
import pytest

from patt.data import Dataset
from patt.simulation import DgpConfig, generate_sample

ACCEPTANCE_LINES = []


def record_criterion(name, passed, detail=""):
    """Store one acceptance line; printed once at the end of the session."""
    ACCEPTANCE_LINES.append(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}".rstrip())


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_dataset(n=200, seed=0, h=1, s=1, effect=1.0, lagged=False):
    rng = np.random.default_rng(seed)
    xd = (rng.random((n, h)) < 0.4).astype(float)
    xc = rng.normal(size=(n, s))
    lin = 0.5 * xd.sum(1) + xc.sum(1)
    z = (rng.random(n) < 1 / (1 + np.exp(-0.8 * lin))).astype(np.int8)
    z[:2] = (0, 1)
    y = lin + 0.3 * xc[:, 0] ** 2 + effect * z + rng.normal(scale=0.5, size=n)
    lag = lin + rng.normal(scale=0.5, size=n) if lagged else None
    return Dataset(y, z, xd, xc, lagged_outcome=lag,
                   discrete_names=tuple(f"d{j}" for j in range(h)),
                   continuous_names=tuple(f"c{j}" for j in range(s)))


@pytest.fixture
def small_data():
    return make_dataset()


@pytest.fixture(scope="session")
def dgp_draw():
    return generate_sample(DgpConfig(seed=20240))
