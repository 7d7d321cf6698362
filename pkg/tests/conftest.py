import pytest

VERDICTS: list = []


@pytest.fixture
def verdict():
    """Record one acceptance line; the lines are printed in the terminal summary."""
    def record(number, ok, detail):
        status = "INFO" if ok is None else ("PASS" if ok else "FAIL")
        VERDICTS.append(f"criterion {number}: {status}  {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
