"""Convex SCP subproblem: assembly into a :class:`ConicProgram` and solution extraction.

Variable layout (fixed order, then epigraph auxiliaries)::

    v    N x m
    L    N x m x n          (row-major per node)
    mu   (N+1) x n
    S    (N+1) x n(n+1)/2   (vectril of each S_k)
    xi   N x n(n+1)/2       (slack of the linearized square-root dynamics)

Quadratics become rotated second-order cones; spectral norms become PSD
blocks ``[[t I, M], [M^T, t I]]``.
"""

from __future__ import annotations


import numpy as np
import scipy.sparse as sp

from .conic import AffExpr, ConicBuilder, ConicProgram, require_solution
from .errors import LayoutMismatch, ShapeMismatch, UnsupportedCone
from .iterate import Iterate, layout_size
from .matfact import cholesky, tril_indices_colmajor, tril_size, unvectril, vectril
from .reformulate import cc_descriptors, objective_terms, terminal_constraint_descriptor

CORE_BLOCKS = ("v", "L", "mu", "S", "xi")
DIAG_CLIP = 1e-9


class _Vars:
    """Affine views of the core variable blocks."""

    def __init__(self, builder, n, m, N):
        self.n, self.m, self.N = n, m, N
        t = tril_size(n)
        self.v = builder.new_vars((N, m), "v")
        self.L = builder.new_vars((N, m * n), "L")
        self.mu = builder.new_vars((N + 1, n), "mu")
        self.S = builder.new_vars((N + 1, t), "S")
        self.xi = builder.new_vars((N, t), "xi")
        self.start = {name: builder.var_blocks[name][0][0] for name in CORE_BLOCKS}
        self.nvars = builder.nvars
        rows, cols = tril_indices_colmajor(n)
        self._tril_flat = rows * n + cols

    def _idx(self, name, k, size):
        return self.start[name] + k * size + np.arange(size)

    def vector(self, name, k):
        size = self.m if name == "v" else self.n if name == "mu" else tril_size(self.n)
        return AffExpr.variables(self._idx(name, k, size), (size, 1), self.nvars)

    def L_mat(self, k):
        return AffExpr.variables(self._idx("L", k, self.m * self.n), (self.m, self.n), self.nvars)

    def S_mat(self, k):
        t = tril_size(self.n)
        idx = self._idx("S", k, t)
        F = sp.csr_matrix((np.ones(t), (self._tril_flat, idx)), shape=(self.n * self.n, self.nvars))
        return AffExpr(F, np.zeros(self.n * self.n), (self.n, self.n))

    def block(self, name, k):
        if name == "v":
            return self.vector("v", k)
        if name == "mu":
            return self.vector("mu", k)
        if name == "L":
            return self.L_mat(k)
        return self.S_mat(k)


def _lower_atom(builder, atom, blk):
    expr = atom.left @ blk.block(atom.block, atom.k)
    if atom.right is not None:
        expr = expr @ atom.right
    if atom.kind == "affine":
        return atom.weight * expr
    t = builder.new_vars((1, 1))
    if atom.kind in ("quadratic", "trace-quadratic"):
        builder.add_rsoc_square(t, expr)
    elif atom.kind == "two-norm-of-affine" or min(expr.shape) == 1:
        builder.add_soc(t, expr)
    else:
        builder.add_spectral_epigraph(t, expr)
    return atom.weight * t


def _lower_term(builder, term, blk):
    total = None
    for atom in term.atoms:
        e = _lower_atom(builder, atom, blk)
        if term.sense == "eq":
            e = e.flat()
        total = e if total is None else total + e
    if term.sense == "objective":
        if total is not None:
            builder.minimize(total)
        return
    total = total + np.asarray(term.constant, dtype=float).reshape(total.shape)
    if term.sense == "eq":
        builder.add_eq(total)
    else:
        builder.add_nonneg(-total)


def _needs_psd(problem):
    terms = objective_terms(problem) + cc_descriptors(problem) + list(terminal_constraint_descriptor(problem))
    for term in terms:
        for atom in term.atoms:
            if atom.kind == "spectral-norm":
                shape = atom.left.shape[0], (problem.sys.n if atom.block in ("S", "L") else 1)
                if min(shape) > 1:
                    return True
    return False


class SubproblemTemplate:
    """Parts of the subproblem that do not change between SCP iterations.

    Boundary conditions, mean dynamics, cost, terminal and chance-constraint
    blocks and the slack epigraphs are assembled once; per iteration only
    the linearized square-root dynamics and the trust-region rows are
    rebuilt, vectorized over the nodes.
    """

    def __init__(self, problem, d_x=None, backend=None):
        sys = problem.sys
        n, m, N = sys.n, sys.m, sys.horizon
        t = tril_size(n)
        if backend is not None and "psd" not in backend.capabilities and _needs_psd(problem):
            raise UnsupportedCone("spectral-norm terms need a PSD-capable backend")
        d_x = np.eye(n) if d_x is None else np.asarray(d_x, dtype=float)
        if d_x.shape != (n, n):
            raise ShapeMismatch(f"d_x must be {n} x {n}")
        self.problem, self.d_x = problem, d_x
        self.dims = (n, m, N)

        b = ConicBuilder()
        blk = _Vars(b, n, m, N)
        s0 = cholesky(problem.p_init)
        b.add_eq(blk.vector("mu", 0) - problem.mu_init[:, None])
        b.add_eq(blk.vector("S", 0) - vectril(s0)[:, None])
        diag_pos = np.array([j * n - j * (j - 1) // 2 for j in range(n)])
        b.add_nonneg(AffExpr.variables(blk.start["S"] + np.add.outer(np.arange(N + 1) * t, diag_pos),
                                       ((N + 1) * n, 1), b.nvars))
        for k in range(N):
            b.add_eq(blk.vector("mu", k + 1) - sys.a_seq[k] @ blk.vector("mu", k)
                     - sys.b_seq[k] @ blk.vector("v", k))
        for term in objective_terms(problem):
            _lower_term(b, term, blk)
        for term in terminal_constraint_descriptor(problem):
            _lower_term(b, term, blk)
        for term in cc_descriptors(problem):
            _lower_term(b, term, blk)
        self.xi_epi = np.empty(N, dtype=int)
        for k in range(N):
            tk = b.new_vars((1, 1))
            self.xi_epi[k] = b.nvars - 1
            b.add_rsoc_square(tk, blk.vector("xi", k))
        self.static = b.build()
        self.start = blk.start

        # d vec(X_k) / d [vectril(S_k), vec(L_k)], row-major vec of the n x n block
        rows, cols = tril_indices_colmajor(n)
        sel = np.zeros((n * n, t))
        sel[rows * n + cols, np.arange(t)] = 1.0
        eye = np.eye(n)
        self.dx_map = np.stack([np.hstack([np.kron(sys.a_seq[k], eye) @ sel, np.kron(sys.b_seq[k], eye)])
                                for k in range(N)])
        self.scaled_map = np.einsum("ij,kjc->kic", np.kron(d_x, eye), self.dx_map)
        self._node_cols = np.hstack([
            self.start["S"] + np.arange(N)[:, None] * t + np.arange(t),
            self.start["L"] + np.arange(N)[:, None] * (m * n) + np.arange(m * n),
        ])

    def dynamic_rows(self, ref, linz, r):
        """``(F, g, cones)`` of the linearized dynamics and the trust region, ``F x + g`` in the cones."""
        n, m, N = self.dims
        t = tril_size(n)
        nv = self.static.nvars
        ref_vec = np.hstack([vectril(ref.S[:N]), ref.L.reshape(N, m * n)])
        jac = np.stack([lz.jacobian() for lz in linz])
        coef = np.einsum("kij,kjc->kic", jac, self.dx_map)  # N x t x (t + mn)
        const_pred = np.einsum("kic,kc->ki", coef, ref_vec)
        w_cols = coef.shape[2]

        # S_{k+1} - s_next_ref - coef (z_k - z_ref) - xi_k == 0
        row = np.arange(N * t).reshape(N, t)
        r_blk = np.repeat(row[:, :, None], w_cols, axis=2)
        c_blk = np.repeat(self._node_cols[:, None, :], t, axis=1)
        eq_r = [r_blk.ravel(), row.ravel(), row.ravel()]
        eq_c = [c_blk.ravel(),
                (self.start["S"] + (np.arange(N)[:, None] + 1) * t + np.arange(t)).ravel(),
                (self.start["xi"] + np.arange(N * t))]
        eq_v = [-coef.ravel(), np.ones(N * t), -np.ones(N * t)]
        snext = np.stack([vectril(lz.s_next_ref) for lz in linz])
        eq_g = (const_pred - snext).ravel()

        # r -/+ D dX_k >= 0
        nn = n * n
        srow = np.arange(N * nn).reshape(N, nn)
        sr_blk = np.repeat(srow[:, :, None], w_cols, axis=2)
        sc_blk = np.repeat(self._node_cols[:, None, :], nn, axis=1)
        shift = np.einsum("kic,kc->ki", self.scaled_map, ref_vec).ravel()
        off = N * t
        rr = np.concatenate(eq_r + [off + sr_blk.ravel(), off + N * nn + sr_blk.ravel()])
        cc = np.concatenate(eq_c + [sc_blk.ravel(), sc_blk.ravel()])
        vv = np.concatenate(eq_v + [-self.scaled_map.ravel(), self.scaled_map.ravel()])
        g = np.concatenate([eq_g, r + shift, r - shift])
        keep = vv != 0.0
        F = sp.csr_matrix((vv[keep], (rr[keep], cc[keep])), shape=(g.size, nv))
        return F, g, [("zero", N * t), ("nonneg", 2 * N * nn)]


def assemble(problem, ref, linz, lam, w, r, d_x=None, backend=None, template=None):
    """Build the convex subproblem about the reference iterate ``ref``.

    Parameters
    ----------
    problem : CsProblem
    ref : Iterate
        Reference ``(v, L, mu, S)``; ``S_k`` must have a positive diagonal.
    linz : list of SqrtStepLinearization
        One per node ``k = 0..N-1``, computed at ``(ref.S[k], ref.L[k])``.
    lam : ndarray, shape (N, n(n+1)/2)
        Multipliers of the dynamics slacks.
    w : float
        Quadratic penalty weight.
    r : float
        Trust-region radius on ``vec(d_x @ dX_k)`` in the infinity norm.
    d_x : ndarray, optional
        Trust-region scaling (identity by default).
    backend : optional
        Checked for PSD capability when spectral-norm terms are present.
    template : SubproblemTemplate, optional
        Reused static part; built here when omitted.
    """
    sys = problem.sys
    n, m, N = sys.n, sys.m, sys.horizon
    t = tril_size(n)
    lam = np.asarray(lam, dtype=float)
    if ref.horizon != N or ref.n != n or ref.m != m:
        raise LayoutMismatch("reference iterate does not match the problem")
    if len(linz) != N or lam.shape != (N, t):
        raise LayoutMismatch(f"need {N} linearizations and multipliers of shape {(N, t)}")
    if not (w > 0 and r > 0):
        raise ValueError("penalty weight and trust radius must be positive")
    if template is None:
        template = SubproblemTemplate(problem, d_x, backend)
    elif template.problem is not problem:
        raise LayoutMismatch("template was built for a different problem")

    st = template.static
    F, g, cones = template.dynamic_rows(ref, linz, r)
    A = sp.vstack([-F, st.A], format="csc")
    b = np.concatenate([g, st.b])
    c = st.c.copy()
    c[template.start["xi"] + np.arange(N * t)] += lam.reshape(-1)
    c[template.xi_epi] += 0.5 * w
    prog = ConicProgram(c, A, b, cones + list(st.cones), dict(st.var_blocks), st.objective_offset)
    prog.check()
    prog.meta["dims"] = (n, m, N)
    prog.meta["core_size"] = layout_size(n, m, N)
    return prog


def _dims(prog):
    try:
        return prog.meta["dims"]
    except KeyError:
        raise LayoutMismatch("program carries no decision layout") from None


def extract(prog, result):
    """Map a backend result (or a raw solution vector) back to ``(Iterate, xi)``."""
    x = result if isinstance(result, np.ndarray) else require_solution(result)
    n, m, N = _dims(prog)
    t = tril_size(n)
    if x.size != prog.nvars:
        raise LayoutMismatch(f"solution has {x.size} entries, program has {prog.nvars}")

    def get(name):
        idx, shape = prog.var_blocks[name]
        return x[idx].reshape(shape)

    v = get("v").copy()
    L = get("L").reshape(N, m, n).copy()
    mu = get("mu").copy()
    S = unvectril(get("S"))
    diag = np.einsum("kii->ki", S)
    clip = (diag < 0) & (diag >= -DIAG_CLIP)
    if np.any(clip):
        kk, ii = np.nonzero(clip)
        S[kk, ii, ii] = 0.0
    xi = get("xi").reshape(N, t).copy()
    return Iterate(v, L, mu, S), xi


def inject(prog, z, xi):
    """Solution vector holding ``z`` and ``xi`` in the core blocks (auxiliaries zero)."""
    n, m, N = _dims(prog)
    x = np.zeros(prog.nvars)
    values = {"v": z.v, "L": z.L.reshape(N, m * n), "mu": z.mu, "S": vectril(z.S), "xi": xi}
    for name, val in values.items():
        idx, shape = prog.var_blocks[name]
        x[idx.reshape(-1)] = np.asarray(val, dtype=float).reshape(-1)
    return x


class _MeanVars:
    def __init__(self, builder, n, m, N):
        self.n, self.m = n, m
        builder.new_vars((N, m), "v")
        builder.new_vars((N + 1, n), "mu")
        self.start = {name: builder.var_blocks[name][0][0] for name in ("v", "mu")}
        self.nvars = builder.nvars

    def block(self, name, k):
        size = self.m if name == "v" else self.n
        return AffExpr.variables(self.start[name] + k * size + np.arange(size), (size, 1), self.nvars)


def mean_program(problem, extra_ccs=()):
    """Deterministic counterpart (covariance terms dropped) over ``(v, mu)`` only.

    Terms on ``S``/``L`` are removed, so chance constraints collapse to
    their nominal form (``alpha^T mu <= beta``, ``||mu|| <= gamma``).
    """
    from dataclasses import replace

    sys = problem.sys
    n, m, N = sys.n, sys.m, sys.horizon
    b = ConicBuilder()
    blk = _MeanVars(b, n, m, N)
    b.add_eq(blk.block("mu", 0) - problem.mu_init[:, None])
    for k in range(N):
        b.add_eq(blk.block("mu", k + 1) - sys.a_seq[k] @ blk.block("mu", k) - sys.b_seq[k] @ blk.block("v", k))
    prob = replace(problem, ccs=tuple(problem.ccs) + tuple(extra_ccs)) if extra_ccs else problem
    terms = objective_terms(prob) + [terminal_constraint_descriptor(prob)[0]] + cc_descriptors(prob)
    for term in terms:
        atoms = tuple(a for a in term.atoms if a.block in ("v", "mu"))
        if not atoms:
            continue
        _lower_term(b, replace(term, atoms=atoms), blk)
    prog = b.build()
    prog.meta["dims"] = (n, m, N)
    return prog


def extract_mean(prog, result):
    x = result if isinstance(result, np.ndarray) else require_solution(result)
    n, m, N = _dims(prog)
    v = x[prog.var_blocks["v"][0]].reshape(N, m)
    mu = x[prog.var_blocks["mu"][0]].reshape(N + 1, n)
    return v.copy(), mu.copy()
