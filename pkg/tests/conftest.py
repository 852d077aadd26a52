"""Shared pytest plumbing: collects one PASS/FAIL line per acceptance
criterion and prints the block after the run, uncaptured."""

import pytest

_CRITERION_LINES = {}


@pytest.fixture
def criterion():
    """Record the verdict line for one acceptance criterion, then assert it."""

    def _verdict(number: int, name: str, passed: bool, detail: str = ""):
        mark = "PASS" if passed else "FAIL"
        line = f"[{mark}] criterion {number:2d} {name}"
        if detail:
            line += f" — {detail}"
        _CRITERION_LINES[number] = line
        assert passed, line

    return _verdict


def pytest_terminal_summary(terminalreporter):
    if _CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERION_LINES):
            terminalreporter.write_line(_CRITERION_LINES[number])
