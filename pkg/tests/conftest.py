import numpy as np
import pytest

from semfuse.core import DEFAULT_REGISTRY, FusionConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def registry():
    return DEFAULT_REGISTRY


@pytest.fixture
def cfg():
    return FusionConfig()


def random_probs(rng, shape, concentration=1.0):
    """Dirichlet-distributed probability vectors along the last axis."""
    *lead, C = shape
    return rng.dirichlet(np.full(C, concentration), size=tuple(lead) or None)


_ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): one numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    number, title = mark.args
    _ACCEPTANCE[number] = ("PASS" if rep.passed else "FAIL", title)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, title = _ACCEPTANCE[number]
        terminalreporter.write_line(f"{status} criterion {number}: {title}")
