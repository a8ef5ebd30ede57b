import pytest

_LINES = []


@pytest.fixture
def verdict(capsys):
    """Record one PASS/FAIL line for the acceptance summary and echo it live."""

    def record(number, name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number} ({name}): {detail}"
        _LINES.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
