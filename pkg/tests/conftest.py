"""Shared pytest plumbing.

The acceptance tests record one human-readable verdict line per criterion;
printing them here, in the terminal summary, keeps them visible in plain
`pytest -v` logs (default fd-level capture would otherwise swallow them for
passing tests).
"""

ACCEPTANCE_LINES = []


def record_acceptance(line: str) -> None:
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
