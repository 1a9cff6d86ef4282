import numpy as np
import pytest

from mipcad import _kernels


@pytest.fixture(params=["numba", "numpy"])
def use_numba(request):
    """Run a test once per kernel path; the numba leg skips if numba is missing."""
    if request.param == "numba" and not _kernels.HAS_NUMBA:
        pytest.skip("numba not installed")
    return request.param == "numba"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance verdicts ------------------------------------------------------

_TITLES: dict[int, str] = {}
_STATUSES: dict[int, list[str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when == "teardown" or (rep.when == "setup" and rep.passed):
        return
    n, title = mark.args
    _TITLES[n] = title
    _STATUSES.setdefault(n, []).append("PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _STATUSES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_STATUSES):
        st = _STATUSES[n]
        verdict = "FAIL" if "FAIL" in st else "SKIP" if "SKIP" in st else "PASS"
        terminalreporter.write_line(f"criterion {n}: {verdict}  {_TITLES[n]}")
