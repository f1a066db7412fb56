import pytest

_ACCEPTANCE = {}


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line per acceptance criterion for the run summary."""
    def record(label, ok, detail=""):
        line = f"{label} {'PASS' if ok else 'FAIL'} {detail}".rstrip()
        _ACCEPTANCE[label] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_ACCEPTANCE, key=lambda s: int(s[1:])):
        terminalreporter.write_line(_ACCEPTANCE[label])
