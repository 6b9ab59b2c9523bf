import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from trmflow import pipeline, trm

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def tiny_config():
    """4 interfaces, 2 observed, P_t = 2: the gradient-check instance."""
    g = trm.RoadGeometry.from_indices(4, 150.0, [0, 3])
    t = trm.TrmConfig(rho_max=0.4, dx=150.0, dT=60.0, v_max=2.0, p_t=2)
    return pipeline.PipelineConfig(g, t, n_past=3, n_future=2, reg_weight=1.0)


@pytest.fixture
def default_geometry():
    return trm.RoadGeometry.from_indices(11, 150.0, [0, 2, 5, 10], [3, 7])


@pytest.fixture
def default_trm():
    return trm.TrmConfig(rho_max=0.4, dx=150.0, dT=60.0, v_max=130 / 3.6)


def random_window(rng, config, n=2):
    """Past and target arrays with entries in (0, 0.12)."""
    no = config.n_observed
    past = rng.uniform(0.0, 0.12, (n, config.n_past, no))
    future = rng.uniform(0.0, 0.12, (n, config.n_future, no))
    return past, np.concatenate([past, future], axis=1)


ACCEPTANCE_LINES = []


def record_acceptance(number: int, passed: bool, detail: str) -> str:
    """Remember one criterion's verdict for the end-of-run summary."""
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
