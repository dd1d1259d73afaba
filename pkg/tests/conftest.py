"""Shared pytest wiring.

Acceptance tests record one verdict line each; the hook below replays
them in a dedicated section after the normal summary so the verdicts are
visible in plain ``pytest -v`` output even with capture enabled.
"""

import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_report():
    def record(line):
        ACCEPTANCE_LINES.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
