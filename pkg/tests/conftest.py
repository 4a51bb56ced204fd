import numpy as np
import pytest

from diffkit import tensor as tn
from diffkit.rng import Rng


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def double():
    """Run the test body in float64 tensors."""
    with tn.precision(np.float64):
        yield


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
