import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sml.dataset import ImageStack, SynthParams, synth_cohort

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_params():
    return SynthParams(n_normal=30, n_abnormal=40, m_range=(20, 40), p=12, cluster_fraction=0.25)


@pytest.fixture(scope="session")
def small_cohort(small_params):
    return synth_cohort(small_params, seed=11)


def random_stack(rng, m, p, pid="S"):
    return ImageStack(pid, rng.uniform(0, 1, size=(m, p, p)))


_ACCEPTANCE = []


@pytest.fixture
def record():
    """Log one PASS/FAIL line for an acceptance criterion; shown live and in the summary."""
    def _record(number, ok, detail, reported_only=False):
        status = "PASS" if ok else ("FAIL (reported only)" if reported_only else "FAIL")
        line = f"criterion {number:>2}: {status} - {detail}"
        _ACCEPTANCE.append(line)
        print(line)
    return _record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
