import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def report_line():
    """Record one pass/fail line for the terminal summary."""

    def record(line):
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
