import pytest

#: (criterion id, passed, detail) lines collected by the acceptance suite
ACCEPTANCE_LINES: list = []


@pytest.fixture
def record_criterion():
    def record(cid: str, passed: bool, detail: str):
        ACCEPTANCE_LINES.append((cid, passed, detail))
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for cid, passed, detail in sorted(ACCEPTANCE_LINES, key=lambda x: int(x[0].split()[0])):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {cid}: {detail}")
