import pytest

_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one pass/fail line per acceptance criterion, then assert it."""

    def record(number: int, ok: bool, detail: str) -> None:
        _LINES.append(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        print(_LINES[-1])
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
