import pytest

VERDICTS = {}


@pytest.fixture
def verdict():
    """Record ``(passed, detail)`` for an acceptance criterion; shown in the terminal summary."""

    def record(number, passed, detail):
        VERDICTS[number] = (bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(VERDICTS):
        passed, detail = VERDICTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
