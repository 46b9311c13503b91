import re
from collections import defaultdict

_CRITERION = re.compile(r"test_criterion_(\d+)_")
_results = defaultdict(list)


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    if report.when == "call" or report.failed:
        _results[int(m.group(1))].append((report.nodeid, report.passed, report.duration))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_results):
        runs = _results[n]
        ok = all(passed for _, passed, _ in runs)
        secs = sum(d for _, _, d in runs)
        failing = [nid.split("::")[-1] for nid, passed, _ in runs if not passed]
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  ({len(runs)} tests, {secs:.1f} s)"
        if failing:
            line += "  failing: " + ", ".join(failing)
        tr.write_line(line)
