from pathlib import Path

import pytest

from lightplan.config import parse_config

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "fixtures"

ACCEPTANCE_LINES = []


@pytest.fixture
def toy():
    return parse_config(str(FIXTURES / "toy.cfg"))


@pytest.fixture
def report():
    """Record a one-line pass/fail verdict for an acceptance criterion, then assert it."""

    def _report(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
