import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ------------------------------------------------- acceptance verdict lines

_VERDICTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    n, title = mark.args
    entry = _VERDICTS.setdefault(n, {"title": title, "ok": True, "ran": False})
    entry["ran"] = entry["ran"] or rep.when == "call"
    entry["ok"] = entry["ok"] and not rep.failed


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        v = _VERDICTS[n]
        status = "PASS" if v["ok"] and v["ran"] else "FAIL"
        terminalreporter.write_line(f"{status}  criterion {n}: {v['title']}")
