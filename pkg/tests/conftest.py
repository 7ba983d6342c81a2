from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"


def fixture_lines(name: str) -> list[list[str]]:
    rows = []
    for line in (FIXTURES / name).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            rows.append(line.split())
    return rows


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


# -- acceptance summary -------------------------------------------------------------------

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title, limit): acceptance criterion with time limit in seconds")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title, limit = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "limit": limit, "ok": True, "elapsed": 0.0})
    entry["ok"] = entry["ok"] and report.passed
    if report.when == "call":
        measured = dict(item.user_properties).get("elapsed", report.duration)
        entry["elapsed"] += measured


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        limit = f"limit {e['limit']:.0f}s" if e["limit"] else "no limit"
        verdict = "PASS" if e["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {verdict}  {e['elapsed']:7.1f}s ({limit})  {e['title']}")
