import pytest

# criterion number -> (passed, detail), filled by the acceptance tests
CRITERIA: dict[int, tuple[bool, str]] = {}
EXPECTED = range(1, 12)


@pytest.fixture
def criterion():
    def record(number: int, passed: bool, detail: str = "") -> bool:
        CRITERIA[number] = (bool(passed), detail)
        print(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in EXPECTED:
        if n in CRITERIA:
            ok, detail = CRITERIA[n]
            terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:>2}: NOT RUN")
