"""Per-criterion pass/fail summary for tests marked ``criterion(n)``."""

import pytest

_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")
    config.stash[_KEY] = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    n = marker.args[0]
    results = item.config.stash[_KEY].setdefault(n, [])
    results.append((item.name, call.excinfo is None))


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash[_KEY]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        runs = results[n]
        failed = [name for name, ok in runs if not ok]
        status = "PASS" if not failed else "FAIL"
        detail = f"{len(runs) - len(failed)}/{len(runs)} checks"
        if failed:
            detail += " (failing: " + ", ".join(failed) + ")"
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {detail}")
