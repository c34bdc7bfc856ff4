"""Collects acceptance-criterion outcomes and prints one line per criterion."""

import pytest

_results = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    name = marker.args[0]
    failed = report.failed or (report.when == "call" and report.outcome != "passed")
    if report.when == "call" or failed:
        prev = _results.get(name, (True, 0.0, ""))
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        _results[name] = (prev[0] and not failed, prev[1] + report.duration, detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, seconds, detail) in _results.items():
        line = f"{'PASS' if ok else 'FAIL'}  {name}  ({seconds:.1f}s)"
        if detail:
            line += f"  {detail}"
        terminalreporter.write_line(line)
