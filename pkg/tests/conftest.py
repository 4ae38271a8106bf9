from __future__ import annotations

import pytest

_LINES: list[str] = []


@pytest.fixture
def criterion():
    """``criterion(name, ok, detail)`` records one acceptance line and returns ``ok``."""

    def record(name: str, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        _LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
