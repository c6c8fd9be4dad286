import warnings

import pytest
from hypothesis import settings

from ddlab.sde_engine import StepSizeWarning

settings.register_profile("ddlab", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("ddlab")

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_log():
    return ACCEPTANCE_LINES


@pytest.fixture(autouse=True)
def _quiet_step_size():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StepSizeWarning)
        yield


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
