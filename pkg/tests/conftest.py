import pytest

from megrez_moe.checks import toy_config

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def toy_cfg():
    return toy_config()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
