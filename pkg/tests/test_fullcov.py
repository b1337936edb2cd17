import numpy as np
import pytest

from sqrtcs.errors import InvalidSpec, ShapeMismatch
from sqrtcs.fullcov import covariance_propagation_loss, loss_series, solve_fullcov_unconstrained
from sqrtcs.ltv import LtvSystem, propagate_cov_full
from sqrtcs.reformulate import Affine, CcSpec, CsProblem, EoQ, QoN

from conftest import di3d_problem, random_spd


def test_trivial_instance_has_zero_cost():
    sys = LtvSystem.time_invariant(np.eye(2), np.eye(2), np.zeros((2, 2)), 3)
    p = np.array([[1.0, 0.2], [0.2, 0.5]])
    problem = CsProblem(sys, np.zeros(2), np.zeros(2), p, p, EoQ(np.zeros((2, 2)), np.eye(2)))
    sol = solve_fullcov_unconstrained(problem)
    assert abs(sol.cost) <= 1e-7
    np.testing.assert_allclose(sol.U, 0.0, atol=1e-5)


def test_relaxation_is_tight_and_pd():
    sol = solve_fullcov_unconstrained(di3d_problem(10))
    assert np.all(np.linalg.eigvalsh(sol.P).min(axis=1) > 0)
    assert sol.relaxation_gap().max() <= 1e-5
    # terminal covariance bound is respected
    assert np.linalg.eigvalsh(0.5 * np.eye(6) - sol.P[-1]).min() >= -1e-7


def test_rejects_unsupported_problems():
    base = di3d_problem(3)
    qon = CsProblem(base.sys, base.mu_init, base.mu_fin, base.p_init, base.p_fin, QoN(np.eye(6), np.eye(3), 0.9))
    with pytest.raises(InvalidSpec):
        solve_fullcov_unconstrained(qon)
    cc = CcSpec("control", Affine(np.ones(3), 1.0, 0.1))
    with pytest.raises(InvalidSpec):
        solve_fullcov_unconstrained(CsProblem(base.sys, base.mu_init, base.mu_fin, base.p_init, base.p_fin,
                                              base.cost, (cc,)))


def test_loss_examples(rng):
    sys = LtvSystem(rng.standard_normal((2, 3, 3)), rng.standard_normal((2, 3, 2)), rng.standard_normal((2, 3, 3)))
    p0, gain = random_spd(rng, 3), rng.standard_normal((2, 3))
    p1 = propagate_cov_full(sys, 0, p0, gain)
    assert covariance_propagation_loss(sys, 0, gain, p0, p1) <= 1e-15
    assert covariance_propagation_loss(sys, 0, gain, p0, 2.0 * p1) == pytest.approx(0.5, rel=1e-14)
    with pytest.raises(ShapeMismatch):
        covariance_propagation_loss(sys, 0, gain, p0, np.eye(2))
    gains = rng.standard_normal((2, 2, 3))
    covs = [p0]
    for k in range(2):
        covs.append(propagate_cov_full(sys, k, covs[-1], gains[k]))
    assert loss_series(sys, gains, np.stack(covs)).max() <= 1e-15
