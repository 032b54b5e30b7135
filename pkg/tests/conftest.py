import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import re

CRITERIA: dict[int, tuple[str, str]] = {}
_NAME = re.compile(r"test_criterion_(\d+)_(\w+)")


def pytest_runtest_logreport(report):
    m = _NAME.search(report.nodeid)
    if m is None or "test_acceptance" not in report.nodeid:
        return
    n = int(m.group(1))
    failed = report.failed or (report.when == "call" and report.outcome != "passed")
    if report.when == "call" or failed:
        prev = CRITERIA.get(n, (m.group(2), "PASS"))[1]
        CRITERIA[n] = (m.group(2).replace("_", " "), "FAIL" if failed or prev == "FAIL" else "PASS")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        desc, status = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}  {desc}")
