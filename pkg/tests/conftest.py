"""Collects one PASS/FAIL line per acceptance criterion and prints them after the run."""

import pytest

RESULTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[RESULTS] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when == "teardown" or (report.when == "setup" and report.passed):
        return
    details = [v for k, v in item.user_properties if k == "measured"]
    if report.failed and not details:
        details = [str(call.excinfo.value).splitlines()[0] if call.excinfo else "error"]
    item.config.stash[RESULTS].append((marker.args[0], report.passed, "; ".join(details)))


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash[RESULTS]
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in lines:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
