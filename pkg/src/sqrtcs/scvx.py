"""SCvx*-style sequential convex programming for square-root covariance steering.

Each iteration linearizes ``S_{k+1} = qr(X_{k+1}^T)^T`` about the current
reference, solves the convex subproblem with slack ``xi`` penalized by
``lam^T xi + w/2 ||xi||^2``, and accepts or rejects the step from the ratio
of actual to predicted reduction of the penalized cost.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg as sla

from .conic import ClarabelBackend
from .errors import BackendFailure, InvalidParameter, MaxIterations, NotPositiveDefinite, RankDeficient
from .iterate import Iterate, Policy
from .ltv import linearize_sqrt_step, propagate_cov_sqrt
from .matfact import cholesky, tril_size, vectril
from .reformulate import cc_descriptors, objective_terms, terminal_constraint_descriptor
from .subproblem import SubproblemTemplate, assemble, extract, extract_mean, mean_program

log = logging.getLogger(__name__)


@dataclass
class ScpParams:
    eps_feas: float = 1e-4
    eps_opt: float = 1e-4
    rho0: float = 0.0
    rho1: float = 0.25
    rho2: float = 0.7
    alpha1: float = 2.0
    alpha2: float = 3.0
    beta: float = 2.0
    gamma: float = 0.9
    r_min: float = 1e-8
    r_max: float = 10.0
    r_init: float = 1.0
    w_init: float = 100.0
    w_max: float = 1e8
    max_iter: int = 200

    def __post_init__(self):
        ok = (0.0 <= self.rho0 < self.rho1 < self.rho2 < 1.0 and self.alpha1 > 1.0 and self.alpha2 > 1.0
              and self.beta > 1.0 and 0.0 < self.gamma < 1.0
              and 0.0 < self.r_min <= self.r_init <= self.r_max
              and self.w_init > 0 and self.w_max >= self.w_init
              and self.eps_feas > 0 and self.eps_opt > 0 and self.max_iter >= 1)
        if not ok:
            raise InvalidParameter(f"invalid SCP parameters: {self}")


@dataclass
class IterRecord:
    dJ: float
    dL: float
    rho: float
    chi: float
    r: float
    w: float
    accepted: bool
    cost: float
    backend_status: str = "optimal"
    solve_time: float = 0.0


@dataclass
class ScpReport:
    iterations: list = field(default_factory=list)
    status: str = "max_iter"
    final_cost: float = float("nan")
    chi: float = float("nan")
    wall_time: float = 0.0
    detail: str = ""

    def as_dict(self):
        out = asdict(self)
        out["iterations"] = [asdict(it) for it in self.iterations]
        return out


# ------------------------------------------------------------------ evaluation


def nonlinear_defect(problem, z):
    """Stacked ``vectril(S_{k+1} - qr(X_{k+1}^T)^T)`` for ``k = 0..N-1`` and its 2-norm."""
    sys = problem.sys
    per_node = [vectril(z.S[k + 1] - propagate_cov_sqrt(sys, k, z.S[k], z.L[k])) for k in range(sys.horizon)]
    xi = np.concatenate(per_node)
    return xi, float(np.linalg.norm(xi))


def cost(problem, z, terms=None):
    terms = objective_terms(problem) if terms is None else terms
    return float(sum(t.value(z) for t in terms))


def penalty(xi, w, lam):
    xi = np.asarray(xi, dtype=float).reshape(-1)
    return float(np.asarray(lam, dtype=float).reshape(-1) @ xi + 0.5 * w * (xi @ xi))


def penalized_cost(problem, z, w, lam, terms=None):
    """``J(z) + P(xi_tilde(z); w, lam)``."""
    xi, _ = nonlinear_defect(problem, z)
    return cost(problem, z, terms) + penalty(xi, w, lam)


def convex_violation(problem, z):
    """Largest violation of the convex constraints (mean dynamics, boundary, terminal, chance) at ``z``."""
    sys = problem.sys
    viol = [np.max(np.abs(z.mu[0] - problem.mu_init)),
            np.max(np.abs(z.S[0] - cholesky(problem.p_init)))]
    for k in range(sys.horizon):
        viol.append(np.max(np.abs(z.mu[k + 1] - sys.a_seq[k] @ z.mu[k] - sys.b_seq[k] @ z.v[k])))
    viol.append(max(0.0, -float(np.einsum("kii->ki", z.S).min())))
    for term in list(terminal_constraint_descriptor(problem)) + cc_descriptors(problem):
        val = term.value(z)
        viol.append(float(np.max(np.abs(val))) if term.sense == "eq" else max(0.0, val))
    return float(max(viol))


# --------------------------------------------------------------- initial guess


def initial_guess(p_init, p_fin, horizon):
    """Cholesky-factor interpolation between ``P_init`` and ``P_fin``.

    Strictly-lower entries move linearly and diagonal entries
    geometrically, so every ``S_k`` keeps a positive diagonal.
    """
    s0, s1 = cholesky(p_init), cholesky(p_fin)
    d0, d1 = np.diag(s0), np.diag(s1)
    low0, low1 = np.tril(s0, -1), np.tril(s1, -1)
    out = []
    for k in range(horizon + 1):
        t = k / horizon
        out.append(low0 + t * (low1 - low0) + np.diag(d0 * (d1 / d0) ** t))
    out[0], out[-1] = s0, s1
    return np.stack(out)


def initial_iterate(problem, backend=None, extra_ccs=()):
    """Reference with interpolated ``S``, zero ``L`` and the deterministic mean solution."""
    backend = backend or ClarabelBackend()
    sys = problem.sys
    prog = mean_program(problem, extra_ccs)
    v, mu = extract_mean(prog, backend.solve(prog))
    S = initial_guess(problem.p_init, problem.p_fin, sys.horizon)
    L = np.zeros((sys.horizon, sys.m, sys.n))
    return Iterate(v, L, mu, S)


def recover_gains(z):
    """``K_k = L_k S_k^{-1}`` by triangular solves."""
    return np.stack([sla.solve_triangular(z.S[k], z.L[k].T, lower=True, trans="T").T
                     for k in range(z.horizon)])


def make_policy(z):
    return Policy(v=z.v.copy(), K=recover_gains(z), mu=z.mu.copy(), S=z.S.copy(), L=z.L.copy())


# ------------------------------------------------------------------------ loop


def _linearize(problem, z):
    return [linearize_sqrt_step(problem.sys, k, z.S[k], z.L[k]) for k in range(problem.horizon)]


def solve(problem, params=None, initial=None, d_x=None, backend=None, strict=True, callback=None):
    """Run the SCP loop.

    Returns ``(policy, report)``. With ``strict`` (default) a non-converged
    run raises :class:`MaxIterations` and a backend failure raises
    :class:`BackendFailure`; both carry the partial report as ``report``.
    Otherwise the report status says what happened.
    """
    params = params or ScpParams()
    backend = backend or ClarabelBackend()
    t_start = time.perf_counter()
    report = ScpReport()
    N, n = problem.horizon, problem.sys.n
    t = tril_size(n)

    ref = initial if initial is not None else initial_iterate(problem, backend)
    if np.any(np.einsum("kii->ki", ref.S) <= 0):
        raise NotPositiveDefinite("initial S_k must have a positive diagonal")
    terms = objective_terms(problem)
    template = SubproblemTemplate(problem, d_x, backend)
    linz = _linearize(problem, ref)
    lam = np.zeros((N, t))
    w, r, delta = params.w_init, params.r_init, np.inf
    ref_feasible = convex_violation(problem, ref) <= 1e-7
    z_star = ref

    for it in range(params.max_iter):
        prog = assemble(problem, ref, linz, lam, w, r, template=template)
        res = backend.solve(prog)
        if res.status not in ("optimal", "optimal_inaccurate"):
            report.status = "backend_failure"
            report.detail = res.detail
            report.wall_time = time.perf_counter() - t_start
            if strict:
                err = BackendFailure(res.status, res.detail)
                err.report = report
                raise err
            break
        z_star, xi_star = extract(prog, res)

        j_ref = penalized_cost(problem, ref, w, lam, terms)
        cost_star = cost(problem, z_star, terms)
        l_star = cost_star + penalty(xi_star, w, lam)
        try:
            xi_tilde, chi = nonlinear_defect(problem, z_star)
            j_star = cost_star + penalty(xi_tilde, w, lam)
        except RankDeficient:
            xi_tilde, chi, j_star = None, np.inf, np.inf
        dJ = j_ref - j_star
        dL = j_ref - l_star
        if not ref_feasible:
            rho = 1.0  # restoration step from an infeasible initial guess
        elif abs(dL) <= 1e-12 * max(1.0, abs(j_ref)):
            rho = 1.0
        else:
            rho = dJ / dL
        accepted = bool(rho >= params.rho0 and np.isfinite(j_star))
        report.iterations.append(IterRecord(float(dJ), float(dL), float(rho), float(chi), float(r), float(w),
                                            accepted, float(cost_star), res.status, res.solve_time))
        log.debug("iter %d: dJ=%.3e dL=%.3e rho=%.3f chi=%.3e r=%.2e w=%.2e %s",
                  it + 1, dJ, dL, rho, chi, r, w, "accept" if accepted else "reject")
        if callback is not None:
            callback(it, report.iterations[-1], z_star)

        if accepted:
            ref = z_star
            ref_feasible = True
            linz = _linearize(problem, ref)
            if abs(dJ) < delta:
                lam = lam + w * xi_tilde.reshape(N, t)
                w = min(params.beta * w, params.w_max)
                delta = params.gamma * abs(dJ)
            if rho < params.rho1:
                r = max(r / params.alpha1, params.r_min)
            elif rho >= params.rho2:
                r = min(params.alpha2 * r, params.r_max)
        else:
            r = max(r / params.alpha1, params.r_min)

        if abs(dJ) <= params.eps_opt and chi <= params.eps_feas:
            report.status = "converged"
            break

    report.final_cost = cost(problem, z_star, terms)
    try:
        report.chi = nonlinear_defect(problem, z_star)[1]
    except RankDeficient:
        report.chi = float("inf")
    report.wall_time = time.perf_counter() - t_start
    policy = make_policy(z_star) if report.status != "backend_failure" or z_star is not ref else make_policy(ref)
    if strict and report.status == "max_iter":
        raise MaxIterations(report, policy)
    return policy, report
