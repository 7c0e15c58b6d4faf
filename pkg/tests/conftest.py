from __future__ import annotations

import pytest

_ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = {}


@pytest.fixture
def verdict(request):
    """Record a PASS/FAIL line for an acceptance criterion and return the flag."""
    log = request.config.stash[_ACCEPTANCE]

    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number:2d}  {title}"
        if detail:
            line += f"  [{detail}]"
        log[number] = line
        print(line)
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(_ACCEPTANCE, {})
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(log):
        terminalreporter.write_line(log[number])
