import pytest

_ACCEPTANCE = []


@pytest.fixture
def verdict():
    """Record one ``PASS``/``FAIL`` line for an acceptance criterion, then assert it."""

    def record(label, ok, detail):
        _ACCEPTANCE.append(f"{label:<5} {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, f"{label}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
