import os

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one PASS/FAIL line per acceptance criterion, printed after the run
CRITERIA: dict[int, tuple[str, str]] = {}


@pytest.fixture
def criterion(request):
    """``record(ok, detail)`` for the test's ``criterion(n)`` mark; a test that
    errors before recording is reported as FAIL."""
    n = request.node.get_closest_marker("criterion").args[0]

    def record(ok: bool, detail: str = "") -> bool:
        CRITERIA[n] = ("PASS" if ok else "FAIL", detail)
        return ok

    yield record
    CRITERIA.setdefault(n, ("FAIL", "error before a verdict was reached"))


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        verdict, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {verdict}  {detail}")
