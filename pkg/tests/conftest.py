from collections import defaultdict

import pytest

_outcomes: dict[int, list[bool]] = defaultdict(list)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    # a failure in any phase fails the criterion; a pass is recorded once, from the call phase
    if report.failed or (report.when == "call" and report.passed):
        _outcomes[marker.args[0]].append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        ok = all(_outcomes[n])
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'} ({len(_outcomes[n])} checks)")
