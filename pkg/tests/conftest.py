"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion."""

_CRITERIA = {}
_OUTCOMES = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark:
            _CRITERIA[item.nodeid] = mark.args


def pytest_runtest_logreport(report):
    if report.nodeid not in _CRITERIA:
        return
    state = _OUTCOMES.setdefault(report.nodeid, {"outcome": "passed", "seconds": 0.0, "detail": ""})
    state["seconds"] += report.duration
    if report.failed:
        state["outcome"] = "failed"
        msg = report.longrepr.reprcrash.message if hasattr(report.longrepr, "reprcrash") else ""
        state["detail"] = str(msg).splitlines()[0] if msg else ""
    elif report.skipped and state["outcome"] != "failed":
        state["outcome"] = "skipped"


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    rows = sorted((_CRITERIA[n][0], _CRITERIA[n][1], _OUTCOMES[n]) for n in _OUTCOMES)
    for number, title, state in rows:
        verdict = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[state["outcome"]]
        line = f"criterion {number:2d} {verdict}  {title} ({state['seconds']:.1f} s)"
        if state["detail"]:
            line += f"  -- {state['detail']}"
        tr.write_line(line)
    passed = sum(1 for *_, s in rows if s["outcome"] == "passed")
    tr.write_line(f"{passed}/{len(rows)} criteria passed")
