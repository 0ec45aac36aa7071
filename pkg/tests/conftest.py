"""Acceptance-criterion bookkeeping: one PASS/FAIL line per criterion."""

import pytest

_results: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _results.setdefault(number, {"title": title, "ok": True, "ran": False, "notes": []})
    if rep.failed or rep.skipped:
        entry["ok"] = False
    if rep.when == "call":
        entry["ran"] = True
    for name, value in item.user_properties:
        if name == "measured" and rep.when == "call":
            entry["notes"].append(value)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        e = _results[number]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        line = f"criterion {number}: {status}  {e['title']}"
        if e["notes"]:
            line += "  [" + "; ".join(e["notes"]) + "]"
        terminalreporter.write_line(line)
