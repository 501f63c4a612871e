"""Collects one pass/fail line per acceptance criterion and prints them after the run."""

import pytest

CRITERIA = {
    1: "theory: normalization bias",
    2: "theory: projection identity",
    3: "theory: max-margin KKT",
    4: "theory: centering",
    5: "autodiff finite differences",
    6: "CT mechanics",
    7: "shortcut experiment",
    8: "corruption robustness",
    9: "BN adaptation scenarios",
    10: "calibration metrics",
    11: "reproducibility",
}

_results: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record():
    def _record(n: int, ok: bool, detail: str) -> bool:
        _results[n] = (bool(ok), detail)
        print(f"criterion {n:2d} [{'PASS' if ok else 'FAIL'}] {CRITERIA[n]}: {detail}")
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        ok, detail = _results.get(n, (False, "not run"))
        terminalreporter.write_line(f"criterion {n:2d} [{'PASS' if ok else 'FAIL'}] {name}: {detail}")
