"""Full-covariance convex baseline for the unconstrained EoQ problem.

Decision variables are the covariances ``P_k``, ``U_k = K_k P_k`` and the
control covariances ``Y_k``; the nonconvex ``Y_k = U_k P_k^{-1} U_k^T`` is
relaxed to ``[[Y_k, U_k], [U_k^T, P_k]] >= 0``, which is tight at the
optimum. This is modeled with cvxpy, independently of the square-root
assembly in :mod:`sqrtcs.subproblem`, so that it can serve as an oracle.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import cvxpy as cp
import numpy as np

from .errors import BackendFailure, InvalidSpec, ShapeMismatch
from .ltv import propagate_cov_full
from .reformulate import EoQ, _per_node


@dataclass
class FullCovSolution:
    mu: np.ndarray
    v: np.ndarray
    P: np.ndarray
    U: np.ndarray
    Y: np.ndarray
    cost: float
    status: str
    solve_time: float

    def gains(self):
        """``K_k = U_k P_k^{-1}``."""
        return np.stack([np.linalg.solve(self.P[k], self.U[k].T).T for k in range(self.U.shape[0])])

    def relaxation_gap(self):
        """``||Y_k - U_k P_k^{-1} U_k^T||_F`` per node."""
        K = self.gains()
        return np.array([np.linalg.norm(self.Y[k] - K[k] @ self.U[k].T) for k in range(self.U.shape[0])])


def solve_fullcov_unconstrained(problem, eta=0.0, solver="CLARABEL", tol=1e-9):
    """Solve the relaxed full-covariance program; raises :class:`BackendFailure` on solver trouble."""
    if not isinstance(problem.cost, EoQ):
        raise InvalidSpec("the full-covariance baseline needs an EoQ cost")
    if problem.ccs:
        raise InvalidSpec("the full-covariance baseline handles unconstrained problems only")
    sys = problem.sys
    n, m, N = sys.n, sys.m, sys.horizon
    q_seq = _per_node(problem.cost.q_seq, N, (n, n))
    r_seq = _per_node(problem.cost.r_seq, N, (m, m))

    mu = cp.Variable((N + 1, n))
    v = cp.Variable((N, m))
    P = [cp.Variable((n, n), symmetric=True) for _ in range(N + 1)]
    U = [cp.Variable((m, n)) for _ in range(N)]
    Y = [cp.Variable((m, m), symmetric=True) for _ in range(N)]

    cons = [mu[0] == problem.mu_init, mu[N] == problem.mu_fin, P[0] == problem.p_init,
            problem.p_fin - P[N] >> 0]
    obj = 0
    for k in range(N):
        a, b, g = sys.a_seq[k], sys.b_seq[k], sys.g_seq[k]
        cons.append(mu[k + 1] == a @ mu[k] + b @ v[k])
        cons.append(P[k + 1] == a @ P[k] @ a.T + b @ U[k] @ a.T + a @ U[k].T @ b.T + b @ Y[k] @ b.T + g @ g.T)
        cons.append(cp.bmat([[Y[k], U[k]], [U[k].T, P[k]]]) >> 0)
        obj += (cp.quad_form(mu[k], q_seq[k]) + cp.quad_form(v[k], r_seq[k])
                + cp.trace(q_seq[k] @ P[k]) + cp.trace(r_seq[k] @ Y[k]) + eta * cp.trace(Y[k]))
    prob = cp.Problem(cp.Minimize(obj), cons)
    t0 = time.perf_counter()
    kwargs = {}
    if solver == "CLARABEL":
        kwargs = dict(tol_gap_abs=tol, tol_gap_rel=tol, tol_feas=tol)
    try:
        prob.solve(solver=solver, **kwargs)
    except cp.error.SolverError as exc:
        raise BackendFailure("numerical_trouble", str(exc)) from None
    elapsed = time.perf_counter() - t0
    if prob.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        status = "infeasible" if "infeasible" in prob.status else "numerical_trouble"
        raise BackendFailure(status, prob.status)
    sym = lambda x: 0.5 * (x + x.T)  # noqa: E731
    return FullCovSolution(
        mu=mu.value, v=v.value,
        P=np.stack([sym(p.value) for p in P]), U=np.stack([u.value for u in U]),
        Y=np.stack([sym(y.value) for y in Y]),
        cost=float(prob.value), status=prob.status, solve_time=elapsed,
    )


def covariance_propagation_loss(sys, k, gain, p_k, p_next):
    """``||phi(K_k, P_k) - P_{k+1}||_F / ||P_{k+1}||_F`` with ``phi`` the closed-loop recursion."""
    p_next = np.asarray(p_next, dtype=float)
    if p_next.shape != (sys.n, sys.n):
        raise ShapeMismatch(f"P_next must be {sys.n} x {sys.n}")
    phi = propagate_cov_full(sys, k, p_k, gain)
    return float(np.linalg.norm(phi - p_next) / np.linalg.norm(p_next))


def loss_series(sys, gains, covs):
    """Loss for ``k = 0..N-1`` given gains ``K_k`` and covariances ``P_0..P_N``."""
    return np.array([covariance_propagation_loss(sys, k, gains[k], covs[k], covs[k + 1])
                     for k in range(sys.horizon)])
