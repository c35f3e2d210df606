import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_ACCEPTANCE = {}


@pytest.fixture
def acceptance(request):
    """Callable ``record(name, ok, detail)`` for the acceptance summary."""

    def record(name, ok, detail):
        _ACCEPTANCE[name] = (ok, detail)

    yield record
    key = request.node.name.split("_")[1]
    rep = getattr(request.node, "rep_call", None)
    if rep is not None and rep.failed and key not in _ACCEPTANCE:
        _ACCEPTANCE[key] = (False, str(rep.longrepr).splitlines()[-1])


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[name]
        terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'}  {detail}")
