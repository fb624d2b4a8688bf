import pytest

_LINES = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def criterion(request):
    """check(n, ok, detail): record one PASS/FAIL line and assert ``ok``."""
    lines = request.config.stash.setdefault(_LINES, [])

    def check(n, ok, detail):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
