import pytest

_lines: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Record one pass/fail line per acceptance criterion; printed in the summary."""

    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        status = "PASS" if ok else "FAIL"
        _lines.append(f"[{status}] criterion {number:2d}: {title}" + (f" ({detail})" if detail else ""))
        print(_lines[-1])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_lines, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
