"""Shared pytest configuration: per-criterion pass/fail reporting for the
acceptance suite."""

import re

_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")
_RESULTS: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    number = int(m.group(1))
    name = m.group(2).replace("_", " ")
    _RESULTS[number] = (name, report.outcome.upper())


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        name, outcome = _RESULTS[number]
        status = "PASS" if outcome == "PASSED" else outcome
        terminalreporter.write_line(f"[criterion {number:2d}] {status}: {name}")
