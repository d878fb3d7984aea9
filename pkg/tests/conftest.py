import pytest

# (criterion number, passed, detail) lines collected by the acceptance suite
ACCEPTANCE_LINES: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture
def record_criterion():
    def record(number: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE_LINES.append((number, bool(passed), detail))
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
        return passed

    return record
