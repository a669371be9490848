import pytest

_CRITERIA: dict[str, dict] = {}
_NOTES: list[str] = []


@pytest.fixture
def acceptance_note():
    """Append a line to the measurements printed after the criteria summary."""
    return _NOTES.append


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(code, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    code, title = marker.args
    entry = _CRITERIA.setdefault(code, {"title": title, "ok": True, "ran": False, "detail": []})
    if report.when == "call":
        entry["ran"] = True
    if report.failed:
        entry["ok"] = False
        entry["detail"].append(item.name)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for code in sorted(_CRITERIA, key=lambda c: (int("".join(ch for ch in c if ch.isdigit())), c)):
        e = _CRITERIA[code]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        tail = f"  ({', '.join(e['detail'])})" if e["detail"] else ""
        terminalreporter.write_line(f"{status}  {code:<3} {e['title']}{tail}")
    if _NOTES:
        terminalreporter.write_line("")
        for line in _NOTES:
            terminalreporter.write_line(line)
