"""Shared test fixtures.

The ``acceptance`` fixture collects one PASS/FAIL line per acceptance
check; the lines are replayed in a dedicated section of the terminal
summary so the outcome of every check is visible in one place.
"""

import pytest

_LINES: dict[str, str] = {}


@pytest.fixture
def acceptance():
    """Record an acceptance check outcome, then assert it."""

    def record(name: str, ok: bool, detail: str = "") -> None:
        mark = "PASS" if ok else "FAIL"
        _LINES[name] = f"{mark}  {name}" + (f": {detail}" if detail else "")
        assert ok, f"{name} failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _LINES:
        return
    terminalreporter.section("acceptance checks")
    for line in _LINES.values():
        terminalreporter.write_line(line)
