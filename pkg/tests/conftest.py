"""Acceptance-criteria bookkeeping.

Tests marked @pytest.mark.acceptance("name") get one summary line each at the
end of the run, so the gate's verdict is readable without scrolling the
full log.
"""

import pytest


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance(name): named acceptance criterion, one line in the summary"
    )
    config._acceptance_results = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    # setup failures (a shared fixture blowing up) count against the criterion too
    if report.when == "call" or (report.when == "setup" and not report.passed):
        item.config._acceptance_results.append((marker.args[0], report.passed))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_acceptance_results", [])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed in results:
        terminalreporter.write_line(f"[ACCEPTANCE] {name}: {'PASS' if passed else 'FAIL'}")
