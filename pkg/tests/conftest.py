import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
CRITERIA = {}


@pytest.fixture
def criterion():
    def record(number, passed, detail):
        CRITERIA[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[number])
