import pytest

_ACCEPTANCE_LINES = []


@pytest.fixture
def record_criterion():
    """Collect one pass/fail line per acceptance criterion for the terminal summary."""

    def _record(name, passed, detail="", skipped=False):
        status = "SKIP" if skipped else "PASS" if passed else "FAIL"
        _ACCEPTANCE_LINES.append(f"[{status}] {name}  {detail}".rstrip())
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
