import numpy as np
import pytest

from sqrtcs.errors import InvalidParameter, NotPositiveDefinite, ShapeMismatch
from sqrtcs.iterate import Policy
from sqrtcs.ltv import LtvSystem, build_double_integrator, propagate_cov_sqrt, rollout_mean
from sqrtcs.matfact import cholesky
from sqrtcs.reformulate import Affine, CcSpec, Norm, ObstacleSpec
from sqrtcs.validate import (binomial_allowance, cc_violation_rates, draw_standard_normals, ellipse_points,
                             envelope_check, gaussian_affine_violation, moment_errors, policy_loss,
                             sample_terminal_tolerance, simulate, terminal_check)

from conftest import random_lower


def planned_policy(sys, mu0, p0, gains, v):
    """Policy whose planned moments follow the exact closed-loop recursions."""
    S = [cholesky(p0)]
    for k in range(sys.horizon):
        S.append(propagate_cov_sqrt(sys, k, S[-1], gains[k] @ S[-1]))
    return Policy(v=v, K=gains, mu=rollout_mean(sys, mu0, v), S=np.stack(S))


@pytest.fixture
def closed_loop(rng):
    sys = build_double_integrator(1, 6, 3.0, 0.05)
    gains = -0.3 * np.abs(rng.standard_normal((6, 1, 2)))
    v = 0.2 * rng.standard_normal((6, 1))
    mu0, p0 = np.array([1.0, 0.0]), np.array([[0.2, 0.05], [0.05, 0.1]])
    return sys, planned_policy(sys, mu0, p0, gains, v), mu0, p0


def test_deterministic_limit(closed_loop):
    sys, policy, mu0, _ = closed_loop
    quiet = LtvSystem(sys.a_seq, sys.b_seq, np.zeros_like(sys.g_seq))
    ens = simulate(quiet, policy, mu0, np.zeros((2, 2)), 5, seed=3)
    for m in range(5):
        np.testing.assert_allclose(ens.states[m], policy.mu, atol=1e-14)


def test_seeded_determinism_and_batching(closed_loop):
    sys, policy, mu0, p0 = closed_loop
    a = simulate(sys, policy, mu0, p0, 50, seed=7)
    b = simulate(sys, policy, mu0, p0, 50, seed=7)
    assert np.array_equal(a.states, b.states) and np.array_equal(a.controls, b.controls)
    c = simulate(sys, policy, mu0, p0, 20, seed=7)
    assert np.array_equal(a.states[:20], c.states)
    d = simulate(sys, policy, mu0, p0, 50, seed=8)
    assert not np.array_equal(a.states, d.states)
    # any block of samples can be drawn independently
    np.testing.assert_array_equal(draw_standard_normals(7, 30, 5, 8), draw_standard_normals(7, 0, 35, 8)[30:])


def test_closed_loop_moments(closed_loop):
    sys, policy, mu0, p0 = closed_loop
    M = 10**4
    ens = simulate(sys, policy, mu0, p0, M, seed=11)
    mean_err, cov_err = moment_errors(ens, policy)
    # mean error in planned standard deviations: standard error is 1/sqrt(M) per coordinate
    assert mean_err.max() <= 4.0 / np.sqrt(M)
    assert cov_err.max() <= 0.05
    assert policy_loss(sys, policy).max() <= 1e-12


def test_simulate_errors(closed_loop):
    sys, policy, mu0, p0 = closed_loop
    with pytest.raises(InvalidParameter):
        simulate(sys, policy, mu0, p0, 0, seed=1)
    with pytest.raises(ShapeMismatch):
        simulate(sys, policy, np.zeros(3), p0, 3, seed=1)
    with pytest.raises(ShapeMismatch):
        simulate(sys.truncated(3), policy, mu0, p0, 3, seed=1)


def test_violation_rates(closed_loop):
    sys, policy, mu0, p0 = closed_loop
    M = 20000
    ens = simulate(sys, policy, mu0, p0, M, seed=5)
    far = CcSpec("state", Affine(np.array([1.0, 0.0]), 1e6, 0.01))
    big = CcSpec("control", Norm(1e6, 0.01))
    assert all(r.max_rate == 0.0 for r in cc_violation_rates(ens, [far, big]))

    beta = 0.15
    bound = CcSpec("control", Affine(np.array([1.0]), beta, 0.05))
    (rate,) = cc_violation_rates(ens, [bound])
    assert rate.nodes == tuple(range(6))
    for k in range(6):
        p = gaussian_affine_violation(policy.v[k], policy.K[k] @ policy.S[k], [1.0], beta)
        tol = 3.0 * np.sqrt(max(p * (1 - p), 1e-12) / M) + 1e-12
        assert abs(rate.rates[k] - p) <= tol

    obs = ObstacleSpec(np.array([0.0, 0.0]), 1e-9, 0.01)
    assert cc_violation_rates(ens, [obs])[0].max_rate == 0.0


def test_gaussian_affine_violation_and_allowance():
    assert gaussian_affine_violation([0.0], np.eye(1), [1.0], 0.0) == pytest.approx(0.5)
    assert gaussian_affine_violation([0.0], np.zeros((1, 1)), [1.0], -1.0) == 1.0
    assert binomial_allowance(0.005, 10**4) == pytest.approx(0.005 + 3 * np.sqrt(0.005 * 0.995 / 1e4))


def test_terminal_check_examples(rng):
    p_fin = np.array([[2.0, 0.4], [0.4, 1.0]])
    check = terminal_check(cholesky(p_fin), p_fin)
    assert check.ratio == pytest.approx(1.0, abs=1e-14) and check.passed
    assert terminal_check(0.5 * cholesky(p_fin), p_fin).ratio == pytest.approx(0.25)
    assert not terminal_check(1.1 * cholesky(p_fin), p_fin).passed
    with pytest.raises(NotPositiveDefinite):
        terminal_check(np.zeros((2, 2)), p_fin)
    with pytest.raises(ShapeMismatch):
        terminal_check(np.zeros((2, 3)), p_fin)
    s = random_lower(rng, 2)
    ratio = terminal_check(s, p_fin).ratio
    white = np.linalg.solve(cholesky(p_fin), s)
    assert ratio == pytest.approx(np.linalg.eigvalsh(white @ white.T).max(), rel=1e-12)
    assert check.as_dict() == {"lambda_max_ratio": check.ratio, "pass": True}


def test_sample_terminal_check(closed_loop):
    sys, policy, mu0, p0 = closed_loop
    M = 5000
    ens = simulate(sys, policy, mu0, p0, M, seed=2)
    p_fin = policy.S[-1] @ policy.S[-1].T
    tol = sample_terminal_tolerance(2, M)
    assert terminal_check(ens, p_fin, tol).passed


def test_envelope(closed_loop):
    sys, policy, mu0, p0 = closed_loop
    ens = simulate(sys, policy, mu0, p0, 4000, seed=9)
    env = envelope_check(ens, policy)
    assert env["pass"] and env["node_fraction"] == 1.0
    # 3-sigma ellipse of a 2-D Gaussian holds 1 - exp(-4.5) of the mass
    assert abs(np.mean(env["fractions"]) - (1 - np.exp(-4.5))) <= 0.005
    pts = ellipse_points(np.zeros(2), np.diag([4.0, 1.0]), 3.0, 16)
    np.testing.assert_allclose(np.sum(pts**2 / [36.0, 9.0], axis=1), 1.0)
