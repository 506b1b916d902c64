import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cbf_inverse.fields import Grid, ScalarField, VelocityField

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# acceptance results, filled by tests/test_acceptance.py and printed at the end
ACCEPTANCE = {}


def record(criterion: int, name: str, passed: bool, detail: str = "") -> None:
    prev = ACCEPTANCE.get(criterion)
    ok = passed and (prev is None or prev[1])
    details = ((prev[2] + "; ") if prev and prev[2] else "") + detail
    ACCEPTANCE[criterion] = (name, ok, details)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")


def random_velocity(grid: Grid, rng: np.random.Generator, scale: float = 1.0) -> VelocityField:
    return VelocityField(scale * rng.standard_normal((grid.nx + 1, grid.ny)),
                         scale * rng.standard_normal((grid.nx, grid.ny + 1)), grid)


def random_scalar(grid: Grid, rng: np.random.Generator) -> ScalarField:
    return ScalarField(rng.standard_normal((grid.nx, grid.ny)), grid)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture(scope="session")
def grid32():
    return Grid(32, 32)
