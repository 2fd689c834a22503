import pytest

_LINES: dict = {}


@pytest.fixture
def criterion():
    """``record(n, passed, detail)`` files one PASS/FAIL line for acceptance criterion ``n``."""

    def record(n: int, passed: bool, detail: str):
        line = f"criterion {n:2d} {'PASS' if passed else 'FAIL'}  {detail}"
        _LINES[n] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_LINES):
        terminalreporter.write_line(_LINES[n])
