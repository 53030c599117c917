import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ------------------------------------------------------------------ acceptance summary
_criteria: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


def pytest_runtest_logreport(report):
    marks = getattr(report, "criterion", None)
    if marks is None:
        return
    n, title = marks
    entry = _criteria.setdefault(n, {"title": title, "ok": True, "seen": False})
    if report.when == "call" or report.outcome != "passed":
        entry["seen"] = True
        entry["ok"] = entry["ok"] and report.outcome == "passed"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        outcome.get_result().criterion = tuple(mark.args)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        e = _criteria[n]
        status = "PASS" if e["ok"] and e["seen"] else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d} {status}  {e['title']}")
