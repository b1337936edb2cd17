import numpy as np
import pytest

from sqrtcs.ltv import build_double_integrator
from sqrtcs.reformulate import CsProblem, EoQ

ACCEPTANCE_LINES = []


def record(criterion, passed, detail):
    """Collect one acceptance line; printed in the terminal summary."""
    line = f"{'PASS' if passed else 'FAIL'}  criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def di3d_problem(horizon, mu_init=(1.0, 1.0, 1.0, 0.0, 0.0, 0.0)):
    """The 3-D double integrator instance: T = 3 s, q = 0.05, I -> 0.5 I, Q = 0.1 I, R = I."""
    sys = build_double_integrator(3, horizon, 3.0, 0.05)
    return CsProblem(sys, np.array(mu_init), np.zeros(6), np.eye(6), 0.5 * np.eye(6),
                     EoQ(0.1 * np.eye(6), np.eye(3)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_lower(rng, n, diag_min=0.5):
    s = np.tril(rng.standard_normal((n, n)))
    s[np.diag_indices(n)] = diag_min + np.abs(s[np.diag_indices(n)])
    return s


def random_spd(rng, n, floor=0.1):
    a = rng.standard_normal((n, n))
    return a @ a.T + floor * np.eye(n)
