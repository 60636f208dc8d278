import os

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

# timing criteria are stated for a single thread
_limits = threadpool_limits(limits=int(os.environ.get("DANET_THREADS", "1")))

ACCEPTANCE_LINES = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def accept():
    """Record one acceptance line: ``accept(number, passed, summary)``."""

    def record(number: int, passed: bool, summary: str) -> bool:
        line = f"ACCEPTANCE {number:>2} {'PASS' if passed else 'FAIL'}  {summary}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
