from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bhlab.environment import EnvironmentLaw

settings.register_profile("bhlab", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("bhlab")

# criterion number -> (passed, detail); filled by the acceptance tests
ACCEPTANCE: dict = {}


@pytest.fixture
def record_acceptance():
    def record(number: int, title: str, passed: bool, detail: str) -> None:
        ACCEPTANCE[number] = (title, bool(passed), detail)
        print(f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")


@pytest.fixture
def two_point_2d():
    return EnvironmentLaw.two_point(1.0, 3.0, 0.5, dimension=2)


@pytest.fixture
def uniform_1d():
    return EnvironmentLaw.uniform(0.5, 2.0, dimension=1)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
