import pytest

_LINES: list[str] = []


@pytest.fixture
def record_criterion(capsys):
    """Print and keep one PASS/FAIL line per acceptance criterion."""

    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
        _LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
