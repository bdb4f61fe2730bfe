import sys
from pathlib import Path

import pytest

# make the brute-force oracles importable as a plain module
sys.path.insert(0, str(Path(__file__).parent))

VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[VERDICTS] = []


@pytest.fixture(scope="session")
def verdict_lines(request):
    """Acceptance PASS/FAIL lines, repeated in the terminal summary."""
    return request.config.stash[VERDICTS]


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
