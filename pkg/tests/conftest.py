import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting --------------------------------------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.fixture
def notes(request):
    """Lines a criterion test wants echoed next to its pass/fail verdict."""
    request.node._criterion_notes = []
    return request.node._criterion_notes


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and rep.passed):
        return
    number, title = marker.args
    detail = list(getattr(item, "_criterion_notes", []))
    if rep.failed and call.excinfo is not None:
        detail.append(str(call.excinfo.value).strip().splitlines()[0][:300])
    _CRITERIA[number] = (title, "PASS" if rep.passed else "FAIL", "; ".join(detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, verdict, detail = _CRITERIA[number]
        terminalreporter.write_line(f"[{verdict}] {number:2d} {title}: {detail}")
