import pathlib

import pytest

# PASS/FAIL lines from the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def fixtures_dir():
    return pathlib.Path(__file__).parent / "fixtures"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
