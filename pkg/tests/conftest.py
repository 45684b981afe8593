from __future__ import annotations

import re

_CRITERIA: dict[int, tuple[str, str, list]] = {}
_PATTERN = re.compile(r"test_criterion_(\d+)_(\w+)")


def pytest_runtest_logreport(report):
    m = _PATTERN.search(report.nodeid)
    if not m:
        return
    number, name = int(m.group(1)), m.group(2).replace("_", " ")
    if report.when == "call" or report.failed:
        if number in _CRITERIA and _CRITERIA[number][1] == "FAIL":
            return
        _CRITERIA[number] = (name, "PASS" if report.passed else "FAIL", list(report.user_properties))
    elif report.skipped and number not in _CRITERIA:
        _CRITERIA[number] = (name, "SKIP", [])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        name, outcome, props = _CRITERIA[number]
        detail = ", ".join(f"{k}={v}" for k, v in props)
        terminalreporter.write_line(f"criterion {number:2d} {outcome}: {name}" + (f" ({detail})" if detail else ""))
