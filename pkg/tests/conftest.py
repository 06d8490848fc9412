import numpy as np
import pytest
from hypothesis import settings

from qosra.config import SENSITIVE, TOLERANT, URLLC, DatasetTemplate, SystemConfig
from qosra.datasets import generate_dataset

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def cfg():
    return SystemConfig()


@pytest.fixture(scope="session")
def small_cfg():
    return SystemConfig(N_max=16)


@pytest.fixture(scope="session")
def small_dataset(small_cfg):
    """Tiny mixed dataset (K=3, one user per service) for pipeline tests."""
    tmpl = DatasetTemplate(users=(TOLERANT, SENSITIVE, URLLC), draws=100)
    return generate_dataset(small_cfg, tmpl, 40, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def _single_service(cfg, service, count, seed):
    tmpl = DatasetTemplate(users=(service,) * 3, draws=100)
    return generate_dataset(cfg, tmpl, count, seed=seed)


@pytest.fixture(scope="session")
def tolerant_dataset(small_cfg):
    return _single_service(small_cfg, TOLERANT, 30, 5)


@pytest.fixture(scope="session")
def urllc_dataset(small_cfg):
    return _single_service(small_cfg, URLLC, 30, 6)


# ---------------------------------------------------------------------------
# acceptance-criterion reporting: one line per criterion in the terminal summary

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    number, title = mark.args
    details = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    ok = rep.passed and _CRITERIA.get(number, (True,))[0]
    _CRITERIA[number] = (ok, title, details)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, title, details = _CRITERIA[number]
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{details}]" if details else ""))
