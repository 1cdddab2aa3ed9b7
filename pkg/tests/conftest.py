import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cropuf.puf import PufParams, sample_puf

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_RESULTS: dict[str, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    label = getattr(item.function, "criterion", None)
    if label is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        ACCEPTANCE_RESULTS[label] = ("PASS" if rep.passed else "FAIL", getattr(item, "criterion_note", ""))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(ACCEPTANCE_RESULTS, key=lambda s: int(s.split()[0])):
        verdict, note = ACCEPTANCE_RESULTS[label]
        terminalreporter.write_line(f"{verdict}  criterion {label}{'  ' + note if note else ''}")


@pytest.fixture
def params():
    return PufParams()


@pytest.fixture
def device():
    return sample_puf(PufParams(seed=3))


@pytest.fixture
def quiet_device():
    return sample_puf(PufParams(seed=3, jitter_sigma_rel=0.0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
