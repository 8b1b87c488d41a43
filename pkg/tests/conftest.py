import numpy as np
import pytest

from qacq.verification import random_model

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def model2d():
    return random_model(np.random.default_rng(7), 2, 6)


@pytest.fixture
def acceptance_log():
    def record(criterion: int, passed: bool, detail: str):
        ACCEPTANCE_LINES[criterion] = f"criterion {criterion}: {'PASS' if passed else 'FAIL'} ({detail})"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
