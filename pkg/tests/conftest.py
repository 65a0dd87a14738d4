import numpy as np
import pytest

from spectraldiff.diffusion import cosine_schedule
from spectraldiff.masks import GridSpec, build_bank


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_bank():
    """8x8 bank with 16 steps (4 orientations x 2 radii x 2 kappas)."""
    spec = GridSpec(radii=(0.2, 0.35), sigmas=(0.1,), thetas_deg=(0.0, 45.0, 90.0, 135.0), kappas=(2.0, 5.0))
    return build_bank(8, 8, spec)


@pytest.fixture(scope="session")
def bank32():
    return build_bank(32, 32, GridSpec.reduced(n_theta=12, radii=(0.15, 0.3), sigmas=(0.08,), kappas=(5.0,)))


@pytest.fixture(scope="session")
def schedule16():
    return cosine_schedule(16)


# one PASS/FAIL line per acceptance criterion, printed after the run
_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and short title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    passed, _ = _CRITERIA.get(n, (True, title))
    if report.failed or (report.when == "call" and report.skipped):
        passed = False
    _CRITERIA[n] = (passed, title)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        passed, title = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {title}")
