from __future__ import annotations

import numpy as np
import pytest

from torus_scope.model import ParameterPoint, SwitchingFunction, PiecewiseSystem, ZoneField, linear_zone
from torus_scope.pwl3d import reduced_system


@pytest.fixture(scope="session")
def pwl3d_m5():
    return reduced_system(-5.0)


@pytest.fixture(scope="session")
def pwl3d_p1():
    return reduced_system(1.0)


def switched_constant_system(slope: float = 0.1):
    """Two constant first-order zones split at ``t = pi + slope * x1``."""
    c0, c1 = np.array([1.0, 0.5]), np.array([-0.3, 2.0])
    z = np.zeros((2, 2))
    zones = (linear_zone([z], [c0]), linear_zone([z], [c1]))
    sw = SwitchingFunction(fn=lambda x, a: np.pi + slope * x[0], gradient=lambda x, a: np.array([slope, 0.0]))
    return PiecewiseSystem(period=2 * np.pi, dim=2, order=1, zones=zones, switchers=(sw,), name="switched"), c0, c1


def rotating_circle_system(a: float = 1.0, omega: float = 1.0, sign: float = 1.0):
    """Smooth autonomous ``x' = eps sign ((a - |x|^2) x + omega J x)``: invariant circle of radius sqrt(a)."""

    def term(t, x, alpha):
        x1, x2 = x[0], x[1]
        r2 = x1 * x1 + x2 * x2
        return np.stack([sign * ((a - r2) * x1 - omega * x2), sign * ((a - r2) * x2 + omega * x1)]) + 0 * np.asarray(t)

    zone = ZoneField(terms=(term,), analytic=True)
    return PiecewiseSystem(period=1.0, dim=2, order=1, zones=(zone,), name="circle")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pp(alpha=0.0, eps=0.0):
    return ParameterPoint(alpha, eps)


# one "PASS/FAIL criterion N: ..." line per acceptance criterion, echoed in the summary
ACCEPTANCE: dict[int, str] = {}


def record_criterion(n: int, ok: bool, message: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {message}"
    ACCEPTANCE[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
