import numpy as np
import pytest

from rigidmhd.discrete_calculus import Grid


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def grid8():
    return Grid.cube(8)


@pytest.fixture
def grid16():
    return Grid.cube(16)


def interior(a, w=2):
    """Strip ``w`` boundary layers from the trailing three axes."""
    return a[..., w:-w, w:-w, w:-w]


# one line per acceptance criterion, filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
