import re

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

_CRITERIA: dict[int, tuple[str, str]] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_runtest_logreport(report):
    m = re.search(r"test_criterion_(\d+)", report.nodeid)
    if not m or report.when == "teardown":
        return
    if report.when == "setup" and report.passed:
        return
    detail = dict(report.user_properties).get("detail", "")
    if report.failed and not detail:
        detail = str(report.longrepr).strip().splitlines()[-1][:160]
    _CRITERIA[int(m.group(1))] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for k in sorted(_CRITERIA):
        status, detail = _CRITERIA[k]
        terminalreporter.write_line(f"criterion {k:2d}: {status}  {detail}")
