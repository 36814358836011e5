import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rangecorr.sim import ScenarioConfig, synthesize_trace

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.function_scoped_fixture]
)
settings.load_profile("default")

_ACCEPTANCE_LINES = []


@pytest.fixture
def report_criterion():
    """Record one acceptance line; the lines are echoed in the terminal summary."""

    def record(number, title, ok, detail):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def short_trace():
    """60 s of a static receiver with biases and noise."""
    return synthesize_trace(ScenarioConfig(duration=60.0, seed=11))


@pytest.fixture(scope="session")
def clean_trace():
    """Noise- and bias-free trace: measurements are exact functions of the truth."""
    return synthesize_trace(
        ScenarioConfig(duration=20.0, seed=4, sigma_range=0.0, sigma_rate=0.0, bias_scale=0.0,
                       trajectory="constant_velocity", velocity_enu=(3.0, -2.0, 0.0))
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
