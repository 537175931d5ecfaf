"""Shared fixtures: the acceptance-criteria reporter.

Each acceptance test records its criterion's outcome through the `criterion`
fixture; the terminal summary then shows one PASS/FAIL line per criterion in
every run, whether or not output capture is on.
"""

import pytest

_RESULTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    def record(n: int, ok: bool, detail: str = "") -> None:
        _RESULTS[n] = (bool(ok), detail)
        status = "PASS" if ok else "FAIL"
        print(f"ACCEPTANCE {n}: {status}" + (f" ({detail})" if detail else ""))
        assert ok, f"acceptance criterion {n} failed: {detail}"
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        ok, detail = _RESULTS[n]
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}"
        if detail:
            line += f"  {detail}"
        terminalreporter.write_line(line)
