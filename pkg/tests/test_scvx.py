import numpy as np
import pytest

from sqrtcs.errors import BackendFailure, InvalidParameter, MaxIterations
from sqrtcs.fullcov import solve_fullcov_unconstrained
from sqrtcs.iterate import Iterate
from sqrtcs.ltv import LtvSystem, rollout_mean, rollout_sqrt
from sqrtcs.matfact import cholesky
from sqrtcs.reformulate import CsProblem, EoQ
from sqrtcs.scvx import (ScpParams, cost, initial_guess, nonlinear_defect, penalized_cost, penalty, recover_gains,
                         solve)

from conftest import di3d_problem


def rollout_iterate(problem, rng):
    sys = problem.sys
    N = sys.horizon
    L = 0.1 * rng.standard_normal((N, sys.m, sys.n))
    v = rng.standard_normal((N, sys.m))
    return Iterate(v, L, rollout_mean(sys, problem.mu_init, v), rollout_sqrt(sys, cholesky(problem.p_init), L))


def test_defect_zero_on_rollout_and_detects_perturbation(rng):
    problem = di3d_problem(5)
    z = rollout_iterate(problem, rng)
    xi, chi = nonlinear_defect(problem, z)
    assert xi.shape == (5 * 21,) and chi <= 1e-14
    for delta in (1e-4, 1e-3):
        bad = z.copy()
        bad.S[3, 2, 1] += delta
        assert nonlinear_defect(problem, bad)[1] >= 0.5 * delta


def test_penalized_cost_identities(rng):
    problem = di3d_problem(4)
    z = rollout_iterate(problem, rng)
    lam = rng.standard_normal((4, 21))
    assert penalized_cost(problem, z, 10.0, lam) == pytest.approx(cost(problem, z), abs=1e-12)
    bad = z.copy()
    bad.S[2] *= 1.1
    xi, chi = nonlinear_defect(problem, bad)
    assert penalized_cost(problem, bad, 10.0, np.zeros((4, 21))) == pytest.approx(cost(problem, bad) + 5.0 * chi**2)
    assert penalty(xi, 10.0, lam) == pytest.approx(lam.reshape(-1) @ xi + 5.0 * xi @ xi)


def test_initial_guess_examples():
    same = initial_guess(2.0 * np.eye(3), 2.0 * np.eye(3), 4)
    assert np.array_equal(same, np.broadcast_to(np.sqrt(2.0) * np.eye(3), (5, 3, 3)))
    seq = initial_guess(np.eye(2), 4.0 * np.eye(2), 2)
    np.testing.assert_allclose(np.diag(seq[1]), [np.sqrt(2.0)] * 2, rtol=1e-15)
    np.testing.assert_allclose(seq[0], np.eye(2))
    np.testing.assert_allclose(seq[2], 2.0 * np.eye(2))


def test_initial_guess_keeps_positive_diagonal(rng):
    for _ in range(20):
        a, b = rng.standard_normal((2, 4, 4))
        seq = initial_guess(a @ a.T + 0.1 * np.eye(4), b @ b.T + 0.1 * np.eye(4), 7)
        assert np.all(np.einsum("kii->ki", seq) > 0)
        assert not np.any(np.triu(seq, 1))


@pytest.mark.parametrize("bad", [dict(rho1=0.8), dict(alpha1=1.0), dict(beta=0.5), dict(gamma=1.0),
                                 dict(r_min=2.0), dict(r_init=20.0), dict(w_init=-1.0), dict(max_iter=0)])
def test_params_validation(bad):
    with pytest.raises(InvalidParameter):
        ScpParams(**bad)


def test_stay_put_problem():
    sys = LtvSystem.time_invariant(np.eye(2), np.eye(2), np.zeros((2, 2)), 3)
    p = np.array([[2.0, 0.3], [0.3, 1.0]])
    problem = CsProblem(sys, np.array([1.0, 2.0]), np.array([1.0, 2.0]), p, p, EoQ(np.zeros((2, 2)), np.eye(2)))
    policy, rep = solve(problem)
    assert rep.status == "converged"
    np.testing.assert_allclose(policy.v, 0.0, atol=1e-6)
    np.testing.assert_allclose(policy.L, 0.0, atol=1e-4)
    assert rep.final_cost <= 1e-8


def test_loop_invariants_and_baseline_parity():
    problem = di3d_problem(5)
    params = ScpParams()
    trace = []
    policy, rep = solve(problem, params, callback=lambda it, rec, z: trace.append(rec))
    assert rep.status == "converged" and trace == rep.iterations
    last = rep.iterations[-1]
    assert abs(last.dJ) <= params.eps_opt and last.chi <= params.eps_feas
    for prev, nxt in zip(rep.iterations, rep.iterations[1:]):
        assert prev.dL >= -1e-7 * max(1.0, abs(prev.cost))
        if not prev.accepted:
            assert nxt.w == prev.w
            assert nxt.r == pytest.approx(max(prev.r / params.alpha1, params.r_min))
        else:
            assert nxt.w in (prev.w, min(params.beta * prev.w, params.w_max))
            assert prev.rho >= params.rho0
    # gain recovery
    for k in range(problem.horizon):
        np.testing.assert_allclose(policy.K[k] @ policy.S[k], policy.L[k], atol=1e-10 * np.linalg.norm(policy.L[k]))
    np.testing.assert_allclose(recover_gains(Iterate(policy.v, policy.L, policy.mu, policy.S)), policy.K)
    base = solve_fullcov_unconstrained(problem)
    assert abs(rep.final_cost - base.cost) / base.cost <= 1e-3


def test_max_iterations():
    problem = di3d_problem(5)
    with pytest.raises(MaxIterations) as err:
        solve(problem, ScpParams(max_iter=1))
    assert len(err.value.report.iterations) == 1 and err.value.policy is not None
    _, rep = solve(problem, ScpParams(max_iter=1), strict=False)
    assert rep.status == "max_iter"


def test_backend_failure_is_reported():
    sys = LtvSystem.time_invariant(np.eye(2), np.zeros((2, 1)), 0.1 * np.eye(2), 2)
    problem = CsProblem(sys, np.zeros(2), np.ones(2), np.eye(2), 4.0 * np.eye(2), EoQ(np.eye(2), np.eye(1)))
    init = Iterate(np.zeros((2, 1)), np.zeros((2, 1, 2)), np.zeros((3, 2)), np.stack([np.eye(2)] * 3))
    with pytest.raises(BackendFailure) as err:
        solve(problem, initial=init)
    assert err.value.status == "infeasible"
    _, rep = solve(problem, initial=init, strict=False)
    assert rep.status == "backend_failure"
