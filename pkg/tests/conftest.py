import os

import pytest
from hypothesis import HealthCheck, settings

from bsde_lab.scenario import TimeGrid, simulate_brownian

settings.register_profile("default", max_examples=200, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def small_ensemble():
    """20 steps, 20k paths: enough for unit-scale solver checks."""
    return simulate_brownian(TimeGrid.uniform(1.0, 20), 1, 20_000, seed=11)


@pytest.fixture(scope="session")
def tiny_ensemble():
    return simulate_brownian(TimeGrid.uniform(1.0, 8), 1, 2_000, seed=5)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
