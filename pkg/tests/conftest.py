"""Shared pytest hooks.

The acceptance suite records one pass/fail line per numbered criterion;
echo them in the terminal summary so they are visible in a plain
``pytest -v`` run (test output is otherwise captured).
"""

import sys


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "CRITERION_LINES", None) if mod else None
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.line(line)
