"""Collects the acceptance verdicts and prints them after the run, one line each."""
import pytest

_VERDICTS = []


@pytest.fixture(scope="session")
def verdict():
    """verdict(name, ok, detail) records one acceptance line and returns ok."""
    def record(name, ok, detail=""):
        _VERDICTS.append((name, bool(ok), detail))
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _VERDICTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
