import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from qerf.dataset import ObservationalDataset
from qerf.simbench import generate_scenario

settings.register_profile("qerf", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("qerf")


@pytest.fixture(scope="session")
def scenario_a_small():
    return generate_scenario("A", 400, 11)


@pytest.fixture
def toy_dataset():
    rng = np.random.default_rng(5)
    n = 60
    C = rng.standard_normal((n, 2))
    w = 0.5 * C[:, 0] - 0.3 * C[:, 1] + rng.standard_normal(n)
    y = w + C.sum(axis=1) + rng.standard_normal(n)
    return ObservationalDataset(exposure=w, covariates=C, outcome=y)


ACCEPTANCE_LINES = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: (len(s.split(":")[0]), s)):
            terminalreporter.write_line(line)
