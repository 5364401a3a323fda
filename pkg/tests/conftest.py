import pytest

VERDICTS: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record a numbered acceptance verdict, then assert it."""
    def record(n: int, ok: bool, detail: str):
        VERDICTS[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(VERDICTS[n])
        assert ok, detail
    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance")
    for n in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[n])
