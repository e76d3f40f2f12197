import pytest

REPORT = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[REPORT] = []


@pytest.fixture
def report(request):
    """Record a criterion's pass/fail line for the terminal summary."""
    lines = request.config.stash[REPORT]

    def add(result):
        print(result.line())
        lines.append((result.number, result.line()))

    return add


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(REPORT, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
