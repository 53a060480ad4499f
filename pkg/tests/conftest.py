"""Shared pytest hooks.

The acceptance tests register a one-line verdict per criterion; echo them in
the terminal summary so they are visible even with output capture on.
"""

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
