"""Shared fixtures and the acceptance summary printer.

Tests tagged ``@pytest.mark.criterion("name")`` are grouped by name; after
the run one ``PASS``/``FAIL`` line per criterion is printed, with any
``record_property("detail", ...)`` values attached by the tests.
"""
from __future__ import annotations

import time
from collections import OrderedDict

import pytest

_RESULTS_KEY = pytest.StashKey[OrderedDict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion this test belongs to")
    config.addinivalue_line("markers", "slow: takes more than a few seconds")
    config.stash[_RESULTS_KEY] = OrderedDict()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    name = marker.args[0]
    results = item.config.stash[_RESULTS_KEY]
    entry = results.setdefault(name, {"ok": True, "seconds": 0.0, "details": [], "tests": 0})
    if report.when == "call":
        entry["tests"] += 1
        entry["seconds"] += report.duration
        entry["details"] += [str(v) for k, v in item.user_properties if k == "detail"]
    if report.failed or (report.when == "call" and report.skipped):
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash[_RESULTS_KEY]
    if not results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for name, e in results.items():
        status = "PASS" if e["ok"] and e["tests"] else "FAIL"
        tr.write_line(f"{status}  {name}  [{e['tests']} test(s), {e['seconds']:.1f} s]")
        for d in e["details"]:
            tr.write_line(f"        {d}")


@pytest.fixture
def stopwatch():
    """Returns a callable giving seconds since the fixture was created."""
    t0 = time.perf_counter()
    return lambda: time.perf_counter() - t0
