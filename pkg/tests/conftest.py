"""Shared pytest plumbing for the collapseguard test suite.

The acceptance tests record one human-readable pass/fail line per criterion;
those lines are replayed in the terminal summary so a plain ``pytest -v`` run
shows the verdict table even when stdout capture is active.
"""

import pytest

_ACCEPTANCE_LINES: list[tuple[int, str]] = []


def _record(index: int, name: str, passed: bool, detail: str) -> str:
    status = "PASS" if passed else "FAIL"
    line = f"{status} criterion {index:02d} [{name}] {detail}"
    _ACCEPTANCE_LINES.append((index, line))
    print(line)
    return line


@pytest.fixture(scope="session")
def acceptance():
    """Callable (index, name, passed, detail) -> formatted verdict line."""
    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
