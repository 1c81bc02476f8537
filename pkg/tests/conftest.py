import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_pair():
    from histreg.core import AffineTransform2D
    from histreg.synth import SynthSpec, generate_pair

    aff = AffineTransform2D(0.99, -0.05, 0.05, 0.99, 6.0, -4.0)
    return generate_pair(SynthSpec(seed=3, width=320, height=240, affine=aff,
                                   deform_amplitude=3.0, deform_scale=200.0))


_ACCEPTANCE = []


@pytest.fixture(scope="session")
def acceptance_line():
    """Record one PASS/FAIL line; the lines are repeated in the terminal summary."""
    def record(name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
