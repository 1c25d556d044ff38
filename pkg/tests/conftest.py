import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def record():
    """Append one 'criterion k: PASS/FAIL ...' line for the terminal summary."""
    def rec(k, ok, msg):
        line = f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {msg}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return ok
    return rec


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
