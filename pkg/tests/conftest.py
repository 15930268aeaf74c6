"""Shared helpers: acceptance verdict lines repeated in the terminal summary."""

from __future__ import annotations

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_VERDICTS: list[str] = []


def verdict(criterion: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {criterion} {'PASS' if ok else 'FAIL'}: {title}: {detail}"
    _VERDICTS.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
