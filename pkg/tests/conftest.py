"""Shared pytest hooks: per-criterion pass/fail summary for the acceptance suite."""

from collections import OrderedDict

_outcomes: "OrderedDict[int, dict]" = OrderedDict()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion this test belongs to")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            number, title = mark.args
            _outcomes.setdefault(number, {"title": title, "tests": {}})["tests"][item.nodeid] = None


def pytest_runtest_logreport(report):
    for entry in _outcomes.values():
        if report.nodeid in entry["tests"]:
            prev = entry["tests"][report.nodeid]
            failed = report.failed or (report.when == "setup" and report.skipped)
            entry["tests"][report.nodeid] = "fail" if failed or prev == "fail" else prev or (
                "pass" if report.when == "call" and report.passed else prev)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_outcomes):
        entry = _outcomes[number]
        states = list(entry["tests"].values())
        if any(s == "fail" for s in states):
            verdict = "FAIL"
        elif states and all(s == "pass" for s in states):
            verdict = "PASS"
        else:
            verdict = "NOT RUN"
        terminalreporter.write_line(f"criterion {number:2d} {verdict:7s} {entry['title']}")
