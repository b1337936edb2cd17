"""Deterministic convex surrogates of the stochastic steering problem.

Every cost term and constraint is a :class:`ConvexTerm`: a sum of
:class:`Atom` values plus a constant. An atom maps one decision block
(``"v"``, ``"L"``, ``"mu"`` or ``"S"`` at node ``k``) through
``left @ M @ right`` and applies a convex scalar function to the result.
The same description is evaluated numerically (SCP bookkeeping,
validation) and lowered to cones by :mod:`sqrtcs.subproblem`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .errors import DegenerateReference, InvalidSpec, NotPositiveDefinite, ShapeMismatch
from .ltv import LtvSystem
from .matfact import chi2_quantile, cholesky, normal_quantile, spectral_norm

ATOM_KINDS = ("affine", "quadratic", "trace-quadratic", "two-norm-of-affine", "spectral-norm")
VECTOR_BLOCKS = ("v", "mu")
MATRIX_BLOCKS = ("L", "S")


# ---------------------------------------------------------------- problem data


@dataclass(frozen=True)
class EoQ:
    """Expectation of ``x^T Q_k x + u^T R_k u`` summed over ``k = 0..N-1``."""

    q_seq: np.ndarray
    r_seq: np.ndarray


@dataclass(frozen=True)
class QoN:
    """``p_J``-quantile of ``||W^x_k x_k||`` plus that of ``||W^u_k u_k||``."""

    wx_seq: np.ndarray
    wu_seq: np.ndarray
    p_j: float


CostSpec = Union[EoQ, QoN]


@dataclass(frozen=True)
class Affine:
    alpha: np.ndarray
    beta: float
    p: float


@dataclass(frozen=True)
class Norm:
    gamma: float
    p: float


@dataclass(frozen=True)
class CcSpec:
    """Chance constraint ``P(condition on x_k or u_k) >= 1 - p`` at each node in ``nodes``.

    ``nodes=None`` means every node: ``0..N`` for states, ``0..N-1`` for controls.
    """

    target: str
    variant: Union[Affine, Norm]
    nodes: Optional[tuple] = None

    def node_list(self, horizon):
        if self.nodes is not None:
            return tuple(int(k) for k in self.nodes)
        return tuple(range(horizon + 1 if self.target == "state" else horizon))


@dataclass(frozen=True)
class ObstacleSpec:
    """Raw circular keep-out ``P(||x[pos] - center|| >= radius) >= 1 - p``.

    Not convex; it is handled through :func:`obstacle_to_halfspaces` and
    checked in its raw form by Monte Carlo.
    """

    center: np.ndarray
    radius: float
    p: float
    pos_idx: tuple = (0, 1)
    nodes: Optional[tuple] = None

    def node_list(self, horizon):
        return tuple(range(horizon + 1)) if self.nodes is None else tuple(self.nodes)


@dataclass(frozen=True)
class CsProblem:
    sys: LtvSystem
    mu_init: np.ndarray
    mu_fin: np.ndarray
    p_init: np.ndarray
    p_fin: np.ndarray
    cost: CostSpec
    ccs: tuple = ()
    norm_kind: str = "spectral"

    def __post_init__(self):
        n = self.sys.n
        for name in ("mu_init", "mu_fin"):
            val = np.asarray(getattr(self, name), dtype=float)
            if val.shape != (n,):
                raise ShapeMismatch(f"{name} must have shape ({n},), got {val.shape}")
            object.__setattr__(self, name, val)
        for name in ("p_init", "p_fin"):
            val = np.asarray(getattr(self, name), dtype=float)
            if val.shape != (n, n):
                raise ShapeMismatch(f"{name} must have shape ({n}, {n}), got {val.shape}")
            cholesky(val)
            object.__setattr__(self, name, val)
        object.__setattr__(self, "ccs", tuple(self.ccs))
        if self.norm_kind not in ("spectral", "frobenius"):
            raise InvalidSpec(f"norm_kind must be 'spectral' or 'frobenius', got {self.norm_kind!r}")
        _validate_cost(self.cost, self.sys)
        for cc in self.ccs:
            _validate_cc(cc, self.sys)

    @property
    def horizon(self):
        return self.sys.horizon


def _per_node(mat, horizon, shape=None):
    mat = np.asarray(mat, dtype=float)
    if mat.ndim == 2:
        mat = np.repeat(mat[None], horizon, axis=0)
    if mat.ndim != 3 or mat.shape[0] != horizon:
        raise InvalidSpec(f"expected one matrix or {horizon} matrices, got shape {mat.shape}")
    if shape is not None and mat.shape[1:] != shape:
        raise InvalidSpec(f"expected matrices of shape {shape}, got {mat.shape[1:]}")
    return mat


def _validate_cost(cost, sys):
    n, m, N = sys.n, sys.m, sys.horizon
    if isinstance(cost, EoQ):
        q = _per_node(cost.q_seq, N, (n, n))
        r = _per_node(cost.r_seq, N, (m, m))
        for qk, rk in zip(q, r):
            if np.linalg.eigvalsh(0.5 * (qk + qk.T)).min() < -1e-12 * max(1.0, np.abs(qk).max()):
                raise InvalidSpec("Q_k must be positive semidefinite")
            try:
                cholesky(0.5 * (rk + rk.T))
            except NotPositiveDefinite:
                raise InvalidSpec("R_k must be positive definite") from None
    elif isinstance(cost, QoN):
        wx = cost.wx_seq if np.ndim(cost.wx_seq) == 3 else np.asarray(cost.wx_seq)[None]
        wu = cost.wu_seq if np.ndim(cost.wu_seq) == 3 else np.asarray(cost.wu_seq)[None]
        if np.shape(wx)[-1] != n or np.shape(wu)[-1] != m:
            raise InvalidSpec("QoN weight matrices do not match state/control sizes")
        if not 0.0 < cost.p_j < 1.0:
            raise InvalidSpec(f"p_J must lie in (0, 1), got {cost.p_j}")
    else:
        raise InvalidSpec(f"unknown cost spec {type(cost).__name__}")


def _validate_cc(cc, sys):
    if cc.target not in ("state", "control"):
        raise InvalidSpec(f"chance-constraint target must be 'state' or 'control', got {cc.target!r}")
    dim = sys.n if cc.target == "state" else sys.m
    var = cc.variant
    if not 0.0 < var.p < 0.5:
        raise InvalidSpec(f"violation probability must lie in (0, 0.5), got {var.p}")
    if isinstance(var, Affine):
        if np.shape(var.alpha) != (dim,):
            raise InvalidSpec(f"alpha must have length {dim}")
    elif isinstance(var, Norm):
        if not var.gamma > 0:
            raise InvalidSpec("gamma must be positive")
    else:
        raise InvalidSpec(f"unknown chance-constraint variant {type(var).__name__}")
    last = sys.horizon if cc.target == "state" else sys.horizon - 1
    for k in cc.node_list(sys.horizon):
        if not 0 <= k <= last:
            raise InvalidSpec(f"node {k} out of range for {cc.target} constraint")


# ----------------------------------------------------------------- descriptors


@dataclass(frozen=True)
class Atom:
    kind: str
    block: str
    k: int
    left: np.ndarray
    right: Optional[np.ndarray] = None
    weight: float = 1.0

    def image(self, z):
        mat = z.block(self.block, self.k)
        out = self.left @ mat
        return out if self.right is None else out @ self.right

    def value(self, z):
        e = self.image(z)
        if self.kind == "affine":
            return self.weight * e.reshape(-1)
        if self.kind in ("quadratic", "trace-quadratic"):
            return self.weight * float(np.sum(e * e))
        if self.kind == "two-norm-of-affine":
            return self.weight * float(np.linalg.norm(e))
        return self.weight * spectral_norm(e)


@dataclass(frozen=True)
class ConvexTerm:
    """``sum(atom values) + constant`` used as an objective term or a constraint.

    ``sense`` is ``"objective"``, ``"le"`` (value <= 0) or ``"eq"``
    (vector value == 0, affine atoms only).
    """

    sense: str
    atoms: tuple
    constant: Union[float, np.ndarray] = 0.0
    label: str = ""

    def value(self, z):
        total = np.asarray(self.constant, dtype=float).copy()
        for atom in self.atoms:
            total = total + atom.value(z)
        return total if self.sense == "eq" else float(np.sum(total))

    @property
    def kinds(self):
        return {a.kind for a in self.atoms}


def _factor_psd(q):
    """``F`` with ``F^T F = q`` for symmetric PSD ``q`` (rows with zero weight dropped)."""
    w, v = np.linalg.eigh(0.5 * (q + q.T))
    keep = w > 1e-14 * max(1.0, w.max(initial=0.0))
    return (np.sqrt(w[keep])[:, None] * v[:, keep].T)


def _matrix_norm_kind(norm_kind):
    return "spectral-norm" if norm_kind == "spectral" else "two-norm-of-affine"


def objective_terms(problem):
    """Per-node convex cost terms for ``k = 0..N-1``."""
    cost = problem.cost
    N, n, m = problem.horizon, problem.sys.n, problem.sys.m
    terms = []
    if isinstance(cost, EoQ):
        q_seq = _per_node(cost.q_seq, N, (n, n))
        r_seq = _per_node(cost.r_seq, N, (m, m))
        for k in range(N):
            fq, fr = _factor_psd(q_seq[k]), _factor_psd(r_seq[k])
            atoms = []
            if fq.shape[0]:
                atoms += [Atom("quadratic", "mu", k, fq), Atom("trace-quadratic", "S", k, fq)]
            atoms += [Atom("quadratic", "v", k, fr), Atom("trace-quadratic", "L", k, fr)]
            terms.append(ConvexTerm("objective", tuple(atoms), label=f"eoq[{k}]"))
        return terms
    if isinstance(cost, QoN):
        wx_seq = _per_node(cost.wx_seq, N)
        wu_seq = _per_node(cost.wu_seq, N)
        mkind = _matrix_norm_kind(problem.norm_kind)
        for k in range(N):
            atoms = []
            for w, vec_block, mat_block in ((wx_seq[k], "mu", "S"), (wu_seq[k], "v", "L")):
                if not np.any(w):
                    continue
                c = np.sqrt(chi2_quantile(cost.p_j, w.shape[0]))
                atoms.append(Atom("two-norm-of-affine", vec_block, k, w))
                atoms.append(Atom(mkind, mat_block, k, w, weight=c))
            terms.append(ConvexTerm("objective", tuple(atoms), label=f"qon[{k}]"))
        return terms
    raise InvalidSpec(f"unknown cost spec {type(cost).__name__}")


def _blocks_for(target):
    return ("mu", "S") if target == "state" else ("v", "L")


def affine_cc_descriptor(spec, k):
    """``alpha^T mean + z_{1-p} ||S^T alpha|| - beta <= 0`` (exact for Gaussians)."""
    var = spec.variant
    if not isinstance(var, Affine):
        raise InvalidSpec("affine_cc_descriptor needs an Affine chance constraint")
    if not 0.0 < var.p < 0.5:
        raise InvalidSpec(f"violation probability must lie in (0, 0.5), got {var.p}")
    alpha = np.asarray(var.alpha, dtype=float)
    vec_block, mat_block = _blocks_for(spec.target)
    z = normal_quantile(1.0 - var.p)
    atoms = (
        Atom("affine", vec_block, k, alpha[None, :]),
        Atom("two-norm-of-affine", mat_block, k, alpha[None, :], weight=z),
    )
    return ConvexTerm("le", atoms, constant=-float(var.beta), label=f"cc-affine[{spec.target},{k}]")


def norm_cc_descriptor(spec, k, dim, norm_kind="spectral"):
    """Conservative ``||mean|| + sqrt(chi2_dim(1-p)) ||S||_2 - gamma <= 0``.

    ``dim`` is the size of the constrained vector (``n`` for states, ``m``
    for controls).
    """
    var = spec.variant
    if not isinstance(var, Norm):
        raise InvalidSpec("norm_cc_descriptor needs a Norm chance constraint")
    if not 0.0 < var.p < 0.5 or not var.gamma > 0:
        raise InvalidSpec("invalid norm chance constraint")
    vec_block, mat_block = _blocks_for(spec.target)
    eye = np.eye(dim)
    c = np.sqrt(chi2_quantile(1.0 - var.p, dim))
    atoms = (
        Atom("two-norm-of-affine", vec_block, k, eye),
        Atom(_matrix_norm_kind(norm_kind), mat_block, k, eye, weight=c),
    )
    return ConvexTerm("le", atoms, constant=-float(var.gamma), label=f"cc-norm[{spec.target},{k}]")


def cc_descriptors(problem):
    """All chance-constraint surrogates of ``problem``, one per (constraint, node)."""
    out = []
    for cc in problem.ccs:
        dim = problem.sys.n if cc.target == "state" else problem.sys.m
        for k in cc.node_list(problem.horizon):
            if isinstance(cc.variant, Affine):
                out.append(affine_cc_descriptor(cc, k))
            else:
                out.append(norm_cc_descriptor(cc, k, dim, problem.norm_kind))
    return out


def terminal_constraint_descriptor(problem):
    """Terminal mean equality and ``||P_fin^{-1/2} S_N||_2 - 1 <= 0``.

    Returns the pair ``(mean_equality, covariance_bound)``.
    """
    N = problem.horizon
    s_fin = cholesky(problem.p_fin)
    s_fin_inv = np.linalg.solve(s_fin, np.eye(problem.sys.n))
    mean_eq = ConvexTerm("eq", (Atom("affine", "mu", N, np.eye(problem.sys.n)),),
                         constant=-problem.mu_fin, label="terminal-mean")
    cov_le = ConvexTerm("le", (Atom("spectral-norm", "S", N, s_fin_inv),),
                        constant=-1.0, label="terminal-cov")
    return mean_eq, cov_le


def obstacle_to_halfspaces(ref_positions, center, radius, p, state_dim=4, pos_idx=(0, 1)):
    """Tangent halfspaces keeping each node's position outside a disk.

    For node ``k`` the halfspace touches the circle at the radial projection
    of ``ref_positions[k]`` and excludes the disk. Each returned
    :class:`CcSpec` applies to that single node.
    """
    center = np.asarray(center, dtype=float)
    out = []
    for k, ref in enumerate(np.asarray(ref_positions, dtype=float)):
        d = ref - center
        dist = np.linalg.norm(d)
        if dist < 1e-9:
            raise DegenerateReference(f"reference position at node {k} coincides with the obstacle center")
        nhat = d / dist
        alpha = np.zeros(state_dim)
        alpha[list(pos_idx)] = -nhat
        beta = -(nhat @ center + radius)
        out.append(CcSpec("state", Affine(alpha, float(beta), p), nodes=(k,)))
    return out
