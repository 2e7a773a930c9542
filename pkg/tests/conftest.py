import numpy as np
import pytest

from mcnet.tensor import make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


def rand(rng, *shape, lo=-1.0, hi=1.0, dtype=np.float32):
    return rng.uniform(lo, hi, size=shape).astype(dtype)


# -- acceptance report -----------------------------------------------------

_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when == "teardown":
        return
    number, title = marker.args
    if report.failed or report.when == "call":
        detail = getattr(item, "criterion_detail", "")
        if report.failed and call.excinfo is not None:
            reason = (str(call.excinfo.value).splitlines() or [call.excinfo.typename])[0]
            detail = f"{detail}; {reason}" if detail else reason
        _criteria[number] = (title, report.passed and report.when == "call", detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, ok, detail = _criteria[number]
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
