import pytest

_ACCEPTANCE = []


@pytest.fixture
def verdict():
    """Record one acceptance line: ``verdict(name, passed, detail)``."""

    def record(name, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
