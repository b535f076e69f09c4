import pytest

_CRITERIA: list = []


def record_criterion(name: str, passed: bool, detail: str) -> None:
    """Collect one acceptance-criterion verdict for the end-of-run summary."""
    _CRITERIA.append((name, passed, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _CRITERIA:
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {name}: {detail}")
