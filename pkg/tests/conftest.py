"""Collects the outcome of tests marked ``criterion(n)`` and prints one line per criterion."""

import pytest

_RESULTS: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    failed_setup = report.when == "setup" and report.failed
    if report.when == "call" or failed_setup:
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        _RESULTS.setdefault(marker.args[0], []).append((report.passed, item.name, detail))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        entries = _RESULTS[n]
        ok = all(passed for passed, _, _ in entries)
        details = " | ".join(d for _, _, d in entries if d)
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {details}")
