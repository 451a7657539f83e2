import os

import pytest

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def threads():
    return int(os.environ.get("WIPS_THREADS", "1"))


@pytest.fixture(scope="session")
def record_acceptance():
    def record(number, result):
        line = f"[{number:>2}] {result.line()}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return result
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s[1:3])):
            terminalreporter.write_line(line)
