import pytest

_ACCEPTANCE = []


@pytest.fixture
def record():
    """Log one acceptance line; the terminal summary prints them all."""
    def _record(number, title, passed, detail):
        _ACCEPTANCE.append((number, title, bool(passed), detail))
        return passed
    return _record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(_ACCEPTANCE):
        terminalreporter.write_line(
            f"criterion {number} {'PASS' if passed else 'FAIL'}  {title}: {detail}")
