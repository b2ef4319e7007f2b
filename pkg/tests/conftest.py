import sys

import numpy as np
import pytest

from powerhom.core import MicroGeometry, PhaseParams


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def sublinear():
    return PhaseParams(1.0, 3.0, 1.5, 2.0)


@pytest.fixture
def mixed():
    return PhaseParams(1.0, 3.0, 1.5, 2.5)


@pytest.fixture
def laminate():
    return MicroGeometry("laminate", 0.5)


@pytest.fixture
def disk():
    return MicroGeometry("disk", 0.25)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "VERDICTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
