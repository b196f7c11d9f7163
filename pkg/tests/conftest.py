import pytest

_LINES: list[str] = []


@pytest.fixture
def criterion_report():
    """Record one ``CRITERION n PASS|FAIL|SKIP: detail`` line, shown in the summary."""

    def report(number: int, status: str, detail: str) -> None:
        line = f"CRITERION {number} {status}: {detail}"
        _LINES.append(line)
        print(line)

    return report


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
