import numpy as np
import pytest

from oocmatch.data import generate_test_split, generate_train_split

# filled by test_acceptance.py, printed once at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_train():
    return generate_train_split(24, seed=5)


@pytest.fixture(scope="session")
def small_test():
    return generate_test_split(12, seed=6)
