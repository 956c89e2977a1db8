import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from gffdecouple.green import GreenKernel  # noqa: E402


@pytest.fixture(scope="session")
def kernel():
    return GreenKernel(3)


@pytest.fixture(scope="session")
def kernel4():
    return GreenKernel(4)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one summary line per acceptance criterion."""
    def add(n, ok, detail=""):
        ACCEPTANCE_LINES.append(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return add


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
