import numpy as np
import pytest

FIG1_TAU = np.array([1.0, 2.0, 3.0])
FIG1_BASE = np.array([0.2, 0.2, 0.6])


@pytest.fixture
def three_point():
    return FIG1_TAU.copy(), FIG1_BASE.copy()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
