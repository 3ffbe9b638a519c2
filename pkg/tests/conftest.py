import re

import pytest

ACCEPTANCE: dict = {}
_OUTCOMES: dict = {}
N_CRITERIA = 10
_NAME = re.compile(r"test_criterion_(\d+)_")


@pytest.fixture
def criterion():
    """record(n, ok, detail): store the outcome of acceptance criterion n, then assert it."""

    def record(n: int, ok: bool, detail: str) -> None:
        ACCEPTANCE[n] = (bool(ok), detail)
        assert ok, f"criterion {n}: {detail}"

    return record


def pytest_runtest_logreport(report):
    m = _NAME.search(report.nodeid)
    if m and (report.when == "call" or report.failed):
        n = int(m.group(1))
        if report.failed or n not in _OUTCOMES:
            _OUTCOMES[n] = report.longreprtext.strip().splitlines()[-1] if report.failed else ""


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in ACCEPTANCE:
            ok, detail = ACCEPTANCE[n]
            line = f"{'PASS' if ok else 'FAIL'}  {detail}"
        elif n in _OUTCOMES:
            line = f"FAIL  error before a result was recorded: {_OUTCOMES[n][:160]}"
        else:
            line = "not run"
        terminalreporter.write_line(f"criterion {n:>2}: {line}")
