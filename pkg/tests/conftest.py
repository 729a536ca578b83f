import pytest

# PASS/FAIL lines recorded by the acceptance suite, echoed after the run
ACCEPTANCE_LINES = []


@pytest.fixture
def record_acceptance():
    def record(number: int, passed: bool, detail: str, elapsed: float, limit: float):
        status = "PASS" if passed and elapsed <= limit else "FAIL"
        line = f"ACCEPTANCE {number} {status}: {detail} [{elapsed:.1f}s / {limit:g}s]"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return status == "PASS"

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
