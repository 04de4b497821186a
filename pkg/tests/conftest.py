import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from siamese_vad.siamese import Architecture, init_model

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# narrow network for tests that exercise plumbing rather than capacity
SMALL_ARCH = Architecture(widths=(4, 4, 8, 8, 8), fc_width=16)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def usable_model(arch=SMALL_ARCH, seed=0, bias=3.0):
    """Random model with fc2 biased toward 'similar' so that p0 is well below 0.3."""
    m = init_model(arch, seed=seed)
    m.params["fc2.bias"] = np.array([bias, -bias], np.float32) / 2
    return m


@pytest.fixture
def small_model():
    return usable_model()


ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one pass/fail line per acceptance criterion."""
    def record(criterion, ok, detail=""):
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}{'  ' + detail if detail else ''}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
