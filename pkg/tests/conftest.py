"""Collects acceptance outcomes and prints one verdict line per criterion at the end of the run."""
import re
from collections import defaultdict

_AC = re.compile(r"test_acceptance\.py::test_ac(\d+)_(\w+)")
_results: dict[int, list[tuple[str, str]]] = defaultdict(list)


def pytest_runtest_logreport(report):
    m = _AC.search(report.nodeid)
    if not m:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _results[int(m.group(1))].append((m.group(2), report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for ac in sorted(_results):
        parts = _results[ac]
        ok = all(outcome == "passed" for _, outcome in parts)
        failed = [name for name, outcome in parts if outcome != "passed"]
        detail = f" (failing: {', '.join(failed)})" if failed else ""
        terminalreporter.write_line(f"AC{ac:<2} {'PASS' if ok else 'FAIL'}  {len(parts)} check(s){detail}")
