import os
import sys

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

from iss_sparse.model import GroundTruth, Problem  # noqa: E402


def random_instance(seed, n=10, p=6, s=3, sigma=0.3, corr=0.0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p)) + corr * rng.standard_normal((n, 1))
    beta = np.zeros(p)
    beta[:s] = rng.standard_normal(s) * 2
    y = X @ beta + sigma * rng.standard_normal(n)
    return Problem(X, y), GroundTruth(beta, sigma)


@pytest.fixture
def scalar_problem():
    return Problem(np.array([[1.0]]), np.array([2.0]))


@pytest.fixture
def identity_problem():
    """Two orthonormal columns (``X* X = I``) with ``X* y = (3, 1)``."""
    r = np.sqrt(2.0)
    return Problem(r * np.eye(2), r * np.array([3.0, 1.0]))


# one PASS/FAIL line per acceptance criterion, printed at the end of the run
_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.failed and props["criterion"] not in _ACCEPTANCE):
        verdict = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        _ACCEPTANCE[props["criterion"]] = (verdict, props.get("title", ""), props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_ACCEPTANCE):
        verdict, title, detail = _ACCEPTANCE[num]
        terminalreporter.write_line(f"{verdict} criterion {num:2d} {title}: {detail}")
