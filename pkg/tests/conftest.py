"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    number, title = marker.args
    detail = "; ".join(v for k, v in item.user_properties if k == "detail")
    status = "PASS" if report.passed else "FAIL"
    if report.failed and not detail:
        detail = str(call.excinfo.value).splitlines()[0] if call.excinfo else ""
    line = f"criterion {number:>2} [{status}] {title}" + (f": {detail}" if detail else "")
    item.config.stash[_LINES].append((number, line))


def pytest_terminal_summary(terminalreporter, config):
    lines = sorted(config.stash.get(_LINES, []))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in lines:
            terminalreporter.write_line(line)
