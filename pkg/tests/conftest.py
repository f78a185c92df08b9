import numpy as np
import pytest

from blockswarm.data import generate_synthetic


@pytest.fixture(scope="session")
def tiny_dataset():
    """10 classes, 8x8, 40 images per class."""
    return generate_synthetic(10, 40, image_size=8, difficulty=1.0, rng_seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance reporting ---------------------------------------------------------

_CRITERIA: dict[int, tuple[str, str, float]] = {}
_SETUP_SECONDS: dict[str, float] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if rep.when == "setup":
        # includes any module fixture built for this test, such as the pipeline runs
        _SETUP_SECONDS[item.nodeid] = rep.duration
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        seconds = rep.duration + (_SETUP_SECONDS.get(item.nodeid, 0.0) if rep.when == "call" else 0.0)
        _CRITERIA[number] = (title, "PASS" if rep.passed else "FAIL", seconds)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, seconds = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d} {status}  {title} ({seconds:.1f} s)")
