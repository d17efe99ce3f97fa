import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one ``PASS``/``FAIL`` line per acceptance criterion."""

    def record(name: str, ok: bool, detail: str) -> bool:
        ACCEPTANCE_LINES.append(f"{name} {'PASS' if ok else 'FAIL'}: {detail}")
        print(ACCEPTANCE_LINES[-1])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
