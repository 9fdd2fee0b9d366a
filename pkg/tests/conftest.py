"""Shared pytest wiring.

The acceptance tests log one line per criterion; this hook replays those
lines at the end of the run so the gate stays readable even when output
capture hides the per-test prints.
"""

import pytest

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_log():
    """Callable that records one formatted criterion-result line."""
    return _ACCEPTANCE_LINES.append


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
