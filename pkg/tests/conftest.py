import datetime as dt
import warnings

import numpy as np
import pytest

from ehrharmon.codes import parse_code
from ehrharmon.embed import RankWarning
from ehrharmon.events import EventRecord

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marks = getattr(report, "criterion", None)
    if marks is None:
        return
    n, title = marks
    entry = _criteria.setdefault(n, {"title": title, "passed": 0, "failed": 0})
    entry["passed" if report.outcome == "passed" else "failed"] += 1


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        rep.criterion = tuple(mark.args)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        e = _criteria[n]
        status = "PASS" if e["failed"] == 0 and e["passed"] > 0 else "FAIL"
        terminalreporter.write_line(f"criterion {n:>2} {status}  {e['title']}  ({e['passed']} passed, {e['failed']} failed)")


@pytest.fixture(autouse=True)
def _quiet_rank_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankWarning)
        yield


def ev(patient, code, day):
    """Test helper: ``day`` is an int offset from 2010-01-01 or an ISO string."""
    if isinstance(day, int):
        day = dt.date(2010, 1, 1) + dt.timedelta(days=day)
    elif isinstance(day, str):
        day = dt.date.fromisoformat(day)
    return EventRecord(patient, parse_code(code), day)


def random_events(rng, n_max=20, n_codes=5, n_patients=3, span=40):
    n = int(rng.integers(0, n_max + 1))
    return {
        ev(f"p{rng.integers(n_patients)}", f"ICD10:A{rng.integers(n_codes)}", int(rng.integers(span)))
        for _ in range(n)
    }


def random_orthogonal(rng, d):
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))
