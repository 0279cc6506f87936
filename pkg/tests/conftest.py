import pytest

# criterion number -> one-line verdict, filled in by test_acceptance.py
VERDICTS: dict[int, str] = {}


def record(n: int, passed: bool, detail: str) -> None:
    line = f"CRITERION {n}: {'PASS' if passed else 'FAIL'} {detail}"
    VERDICTS[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])


@pytest.fixture
def verdict():
    return record
