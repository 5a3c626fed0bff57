import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title, limit_s): acceptance criterion")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title, limit = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "limit": limit, "ok": True, "elapsed": None})
    if report.failed or (report.when == "call" and report.skipped):
        entry["ok"] = False
        entry.setdefault("reason", str(report.longrepr).strip().splitlines()[-1][:120])
    for key, value in item.user_properties:
        if key == "elapsed_s":
            entry["elapsed"] = value


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        elapsed = "n/a" if e["elapsed"] is None else f"{e['elapsed']:.1f}s"
        status = "PASS" if e["ok"] else "FAIL"
        line = f"AC{number:<2} {status}  {e['title']}  [{elapsed} / limit {e['limit']}s]"
        if not e["ok"]:
            line += f"  ({e.get('reason', '')})"
        terminalreporter.write_line(line)
