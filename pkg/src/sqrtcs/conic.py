"""Backend-agnostic conic programs and the Clarabel backend.

A :class:`ConicProgram` is stored in the standard form::

    minimize    c^T x
    subject to  A x + s = b,   s in K_1 x K_2 x ...

with cones ``("zero", d)``, ``("nonneg", d)``, ``("soc", d)`` and
``("psd", d)``. PSD blocks hold the upper triangle of a ``d x d``
symmetric matrix in column-major order with off-diagonal entries scaled
by ``sqrt(2)``.

Programs are built with :class:`ConicBuilder` from :class:`AffExpr`
objects: matrix-shaped affine functions of the decision vector, stored
row-major as a sparse coefficient matrix and a constant.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import BackendFailure, ShapeMismatch, UnsupportedCone

CONE_KINDS = ("zero", "nonneg", "soc", "psd")
TOL_ENV = "SQRTCS_BACKEND_TOL"


def _pad(mat, ncols):
    if mat.shape[1] == ncols:
        return mat
    mat = mat.tocsr(copy=True)
    mat.resize((mat.shape[0], ncols))
    return mat


class AffExpr:
    """Affine matrix expression ``reshape(F @ x + g, shape)`` (row-major)."""

    __slots__ = ("F", "g", "shape")
    __array_ufunc__ = None  # make numpy defer ``ndarray @ AffExpr`` to __rmatmul__

    def __init__(self, F, g, shape):
        self.F = sp.csr_matrix(F)
        self.g = np.asarray(g, dtype=float).reshape(-1)
        self.shape = tuple(shape)
        if self.F.shape[0] != self.g.size or int(np.prod(self.shape)) != self.g.size:
            raise ShapeMismatch("inconsistent affine expression")

    @classmethod
    def variables(cls, idx, shape, nvars):
        idx = np.asarray(idx).reshape(-1)
        F = sp.csr_matrix((np.ones(idx.size), (np.arange(idx.size), idx)), shape=(idx.size, nvars))
        return cls(F, np.zeros(idx.size), shape)

    @classmethod
    def constant(cls, value, nvars=0):
        value = np.atleast_2d(np.asarray(value, dtype=float))
        return cls(sp.csr_matrix((value.size, nvars)), value.reshape(-1), value.shape)

    @property
    def nvars(self):
        return self.F.shape[1]

    def __add__(self, other):
        if not isinstance(other, AffExpr):
            other = AffExpr.constant(np.broadcast_to(np.asarray(other, dtype=float), self.shape))
        if other.shape != self.shape:
            raise ShapeMismatch(f"cannot add {self.shape} and {other.shape}")
        ncols = max(self.nvars, other.nvars)
        return AffExpr(_pad(self.F, ncols) + _pad(other.F, ncols), self.g + other.g, self.shape)

    __radd__ = __add__

    def __neg__(self):
        return AffExpr(-self.F, -self.g, self.shape)

    def __sub__(self, other):
        return self + (-other if isinstance(other, AffExpr) else -np.asarray(other, dtype=float))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, scalar):
        return AffExpr(self.F * float(scalar), self.g * float(scalar), self.shape)

    __rmul__ = __mul__

    def __rmatmul__(self, mat):
        mat = np.atleast_2d(np.asarray(mat, dtype=float))
        p, q = self.shape
        if mat.shape[1] != p:
            raise ShapeMismatch(f"cannot left-multiply {self.shape} by {mat.shape}")
        op = sp.kron(sp.csr_matrix(mat), sp.identity(q), format="csr")
        return AffExpr(op @ self.F, op @ self.g, (mat.shape[0], q))

    def __matmul__(self, mat):
        mat = np.atleast_2d(np.asarray(mat, dtype=float))
        p, q = self.shape
        if mat.shape[0] != q:
            raise ShapeMismatch(f"cannot right-multiply {self.shape} by {mat.shape}")
        op = sp.kron(sp.identity(p), sp.csr_matrix(mat.T), format="csr")
        return AffExpr(op @ self.F, op @ self.g, (p, mat.shape[1]))

    @property
    def T(self):
        p, q = self.shape
        perm = np.arange(p * q).reshape(p, q).T.reshape(-1)
        return AffExpr(self.F[perm], self.g[perm], (q, p))

    def flat(self):
        return AffExpr(self.F, self.g, (self.g.size, 1))

    def take(self, flat_idx, shape=None):
        flat_idx = np.asarray(flat_idx).reshape(-1)
        return AffExpr(self.F[flat_idx], self.g[flat_idx], shape or (flat_idx.size, 1))

    def sum(self):
        ones = np.ones((1, self.g.size))
        return AffExpr(sp.csr_matrix(ones) @ self.F, ones @ self.g, (1, 1))

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return (_pad(self.F, x.size) @ x + self.g).reshape(self.shape)

    @staticmethod
    def vstack(exprs):
        ncols = max(e.nvars for e in exprs)
        q = {e.shape[1] for e in exprs}
        if len(q) != 1:
            raise ShapeMismatch("vstack needs equal column counts")
        F = sp.vstack([_pad(e.F, ncols) for e in exprs], format="csr")
        g = np.concatenate([e.g for e in exprs])
        return AffExpr(F, g, (sum(e.shape[0] for e in exprs), q.pop()))

    @staticmethod
    def block(rows):
        """2-D block assembly of expressions (like ``np.block``)."""
        strips = []
        for row in rows:
            p = row[0].shape[0]
            if any(e.shape[0] != p for e in row):
                raise ShapeMismatch("block row heights differ")
            widths = [e.shape[1] for e in row]
            total = sum(widths)
            # interleave columns into row-major order of the combined strip
            ncols = max(e.nvars for e in row)
            order = []
            offs = np.cumsum([0] + [e.g.size for e in row])
            for i in range(p):
                for j, e in enumerate(row):
                    order.append(offs[j] + i * widths[j] + np.arange(widths[j]))
            order = np.concatenate(order)
            F = sp.vstack([_pad(e.F, ncols) for e in row], format="csr")[order]
            g = np.concatenate([e.g for e in row])[order]
            strips.append(AffExpr(F, g, (p, total)))
        return AffExpr.vstack(strips)


def svec_indices(d):
    """Row-major flat indices and scale factors for the PSD triangle layout."""
    idx, scale = [], []
    for j in range(d):
        for i in range(j + 1):
            idx.append(i * d + j)
            scale.append(1.0 if i == j else np.sqrt(2.0))
    return np.array(idx), np.array(scale)


@dataclass
class ConicProgram:
    c: np.ndarray
    A: sp.csc_matrix
    b: np.ndarray
    cones: list
    var_blocks: dict = field(default_factory=dict)
    objective_offset: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def nvars(self):
        return self.c.size

    @property
    def ncons(self):
        return self.b.size

    def cone_kinds(self):
        return {kind for kind, _ in self.cones}

    def check(self):
        if self.A.shape != (self.b.size, self.c.size):
            raise ShapeMismatch("constraint matrix shape does not match c and b")
        total = 0
        for kind, dim in self.cones:
            if kind not in CONE_KINDS:
                raise ShapeMismatch(f"unknown cone {kind!r}")
            total += dim * (dim + 1) // 2 if kind == "psd" else dim
        if total != self.b.size:
            raise ShapeMismatch(f"cone dimensions sum to {total}, expected {self.b.size}")

    def objective(self, x):
        return float(self.c @ x) + self.objective_offset

    # serialization -----------------------------------------------------

    def dumps(self):
        """Sparse-triplet text form (see README for the layout)."""
        A = self.A.tocoo()
        lines = ["sqrtcs-conic 1",
                 f"nvars {self.nvars}",
                 f"ncons {self.ncons}",
                 f"offset {float(self.objective_offset)!r}",
                 "cones " + " ".join(f"{k}:{d}" for k, d in self.cones)]
        nz = np.flatnonzero(self.c)
        lines.append(f"c {nz.size}")
        lines += [f"{i} {float(self.c[i])!r}" for i in nz]
        lines.append(f"A {A.nnz}")
        lines += [f"{int(r)} {int(cc)} {float(v)!r}" for r, cc, v in zip(A.row, A.col, A.data)]
        nz = np.flatnonzero(self.b)
        lines.append(f"b {nz.size}")
        lines += [f"{i} {float(self.b[i])!r}" for i in nz]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text):
        lines = iter(text.splitlines())
        if next(lines).split() != ["sqrtcs-conic", "1"]:
            raise ValueError("not a sqrtcs conic program")
        nvars = int(next(lines).split()[1])
        ncons = int(next(lines).split()[1])
        offset = float(next(lines).split()[1])
        cones = []
        for tok in next(lines).split()[1:]:
            kind, dim = tok.split(":")
            cones.append((kind, int(dim)))
        c = np.zeros(nvars)
        for _ in range(int(next(lines).split()[1])):
            i, v = next(lines).split()
            c[int(i)] = float(v)
        nnz = int(next(lines).split()[1])
        trip = np.array([next(lines).split() for _ in range(nnz)], dtype=float).reshape(nnz, 3)
        A = sp.csc_matrix((trip[:, 2], (trip[:, 0].astype(int), trip[:, 1].astype(int))),
                          shape=(ncons, nvars))
        b = np.zeros(ncons)
        for _ in range(int(next(lines).split()[1])):
            i, v = next(lines).split()
            b[int(i)] = float(v)
        prog = cls(c, A, b, cones, objective_offset=offset)
        prog.check()
        return prog


class ConicBuilder:
    """Accumulates variables, cone memberships and a linear objective."""

    def __init__(self):
        self.nvars = 0
        self.blocks = []  # (kind, dim, F, g)
        self.c_parts = []  # (idx, coef)
        self.offset = 0.0
        self.var_blocks = {}

    def new_vars(self, shape, name=None):
        size = int(np.prod(shape))
        idx = np.arange(self.nvars, self.nvars + size)
        self.nvars += size
        if name is not None:
            self.var_blocks[name] = (idx, tuple(shape))
        return AffExpr.variables(idx, shape, self.nvars)

    def _add(self, kind, dim, expr):
        self.blocks.append((kind, dim, expr.F, expr.g))

    def add_eq(self, expr):
        """``expr == 0``."""
        self._add("zero", expr.g.size, expr)

    def add_nonneg(self, expr):
        """``expr >= 0`` elementwise."""
        self._add("nonneg", expr.g.size, expr)

    def add_soc(self, t, x):
        """``||x|| <= t`` for scalar expression ``t``."""
        self._add("soc", 1 + x.g.size, AffExpr.vstack([t.flat(), x.flat()]))

    def add_rsoc_square(self, t, x):
        """``||x||^2 <= t`` via ``||(2x, t-1)|| <= t+1``."""
        t = t.flat()
        self._add("soc", 2 + x.g.size, AffExpr.vstack([t + 1.0, t - 1.0, 2.0 * x.flat()]))

    def add_psd(self, mat):
        """Symmetric matrix expression ``mat`` is positive semidefinite."""
        d = mat.shape[0]
        if mat.shape != (d, d):
            raise ShapeMismatch("PSD block must be square")
        idx, scale = svec_indices(d)
        sel = mat.take(idx)
        sel = AffExpr(sp.diags(scale) @ sel.F, scale * sel.g, sel.shape)
        self._add("psd", d, sel)

    def add_spectral_epigraph(self, t, mat):
        """``||mat||_2 <= t`` via ``[[t I, M], [M^T, t I]] >= 0``."""
        p, q = mat.shape
        self.add_psd(AffExpr.block([[_scaled_identity(t, p), mat], [mat.T, _scaled_identity(t, q)]]))

    def minimize(self, expr, weight=1.0):
        """Add ``weight * expr`` (scalar) to the objective."""
        expr = expr.flat()
        if expr.g.size != 1:
            raise ShapeMismatch("objective contributions must be scalar")
        coo = expr.F.tocoo()
        self.c_parts.append((coo.col, weight * coo.data))
        self.offset += weight * float(expr.g[0])

    def add_linear_objective(self, idx, coef):
        self.c_parts.append((np.asarray(idx), np.asarray(coef, dtype=float)))

    def build(self):
        c = np.zeros(self.nvars)
        for idx, coef in self.c_parts:
            np.add.at(c, idx, coef)
        cones, Fs, gs = [], [], []
        for kind, dim, F, g in self.blocks:
            if kind in ("zero", "nonneg") and cones and cones[-1][0] == kind:
                cones[-1] = (kind, cones[-1][1] + dim)
            else:
                cones.append((kind, dim))
            Fs.append(_pad(F, self.nvars))
            gs.append(g)
        A = -sp.vstack(Fs, format="csc") if Fs else sp.csc_matrix((0, self.nvars))
        b = np.concatenate(gs) if gs else np.zeros(0)
        prog = ConicProgram(c, A, b, cones, dict(self.var_blocks), self.offset)
        prog.check()
        return prog


def _scaled_identity(t, d):
    """``t * I_d`` for a scalar expression ``t``."""
    t = t.flat()
    rows = np.repeat(0, d * d)
    pick = AffExpr(t.F[rows], t.g[rows], (d, d))
    mask = np.eye(d).reshape(-1)
    return AffExpr(sp.diags(mask) @ pick.F, mask * pick.g, (d, d))


@dataclass
class BackendResult:
    status: str
    x: np.ndarray
    objective: float
    detail: str = ""
    solve_time: float = 0.0
    iterations: int = 0


class ClarabelBackend:
    """Interior-point backend supporting linear, second-order and PSD cones."""

    capabilities = frozenset({"soc", "psd"})

    def __init__(self, tol=None, max_iter=500, verbose=False):
        if tol is None:
            tol = float(os.environ.get(TOL_ENV, "1e-9"))
        self.tol = tol
        self.max_iter = max_iter
        self.verbose = verbose

    def solve(self, prog):
        import clarabel

        missing = {k for k in prog.cone_kinds() if k in ("soc", "psd")} - self.capabilities
        if missing:
            raise UnsupportedCone(f"backend lacks cones {sorted(missing)}")
        cones = []
        for kind, dim in prog.cones:
            if kind == "zero":
                cones.append(clarabel.ZeroConeT(dim))
            elif kind == "nonneg":
                cones.append(clarabel.NonnegativeConeT(dim))
            elif kind == "soc":
                cones.append(clarabel.SecondOrderConeT(dim))
            else:
                cones.append(clarabel.PSDTriangleConeT(dim))
        settings = clarabel.DefaultSettings()
        settings.verbose = self.verbose
        settings.max_iter = self.max_iter
        settings.tol_gap_abs = self.tol
        settings.tol_gap_rel = self.tol
        settings.tol_feas = self.tol
        settings.tol_ktratio = max(self.tol * 1e-2, 1e-12)
        P = sp.csc_matrix((prog.nvars, prog.nvars))
        solver = clarabel.DefaultSolver(P, prog.c, sp.csc_matrix(prog.A), prog.b, cones, settings)
        sol = solver.solve()
        name = str(sol.status).split(".")[-1]
        status = _STATUS.get(name, "numerical_trouble")
        x = np.array(sol.x, dtype=float)
        obj = float(prog.c @ x) + prog.objective_offset if x.size else np.nan
        return BackendResult(status, x, obj, name, float(sol.solve_time), int(sol.iterations))


_STATUS = {
    "Solved": "optimal",
    "AlmostSolved": "optimal_inaccurate",
    "PrimalInfeasible": "infeasible",
    "AlmostPrimalInfeasible": "infeasible",
    "DualInfeasible": "unbounded",
    "AlmostDualInfeasible": "unbounded",
}


def require_solution(result, allow_inaccurate=True):
    ok = {"optimal", "optimal_inaccurate"} if allow_inaccurate else {"optimal"}
    if result.status not in ok:
        raise BackendFailure(result.status, result.detail)
    return result.x
