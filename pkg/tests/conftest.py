"""Shared pytest wiring.

The acceptance tests in test_acceptance.py register one verdict line per
criterion through record_criterion(); the terminal-summary hook below prints
them in a dedicated section so the outcome of every criterion is visible in
one place even when -v output scrolls past.
"""

from __future__ import annotations

_CRITERION_LINES: list[str] = []


def record_criterion(line: str) -> None:
    _CRITERION_LINES.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config) -> None:
    if not _CRITERION_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in _CRITERION_LINES:
        terminalreporter.write_line(line)
