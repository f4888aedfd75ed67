"""Shared pytest hooks for the test suite."""

import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance checklist, one PASS/FAIL line per criterion."""
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None) if module is not None else None
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
