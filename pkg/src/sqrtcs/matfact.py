"""Dense factorizations and special functions for square-root covariance arithmetic.

Conventions used throughout the package:

* ``cholesky`` returns the lower-triangular factor with positive diagonal.
* ``qr_econ_pos`` is the economy QR with a positive diagonal on ``R``,
  which makes the factorization unique for full-column-rank input.
* ``vectril`` stacks the lower triangle column by column
  (column ``j``, rows ``j..n-1``).
"""

from __future__ import annotations

import functools
import math
from typing import NamedTuple

import numpy as np
from scipy import linalg as sla
from scipy import special

from .errors import DomainError, NotPositiveDefinite, RankDeficient, ShapeMismatch

PIVOT_RTOL = 1e-12
RANK_RTOL = 1e-10


class QrPair(NamedTuple):
    q: np.ndarray
    r: np.ndarray


def cholesky(p, pivot_rtol=PIVOT_RTOL):
    """Lower Cholesky factor ``S`` of a symmetric positive definite ``p``.

    Raises
    ------
    NotPositiveDefinite
        If ``p`` is indefinite or a pivot is below ``pivot_rtol * max(diag(p))``.
    """
    p = np.asarray(p, dtype=float)
    if p.ndim != 2 or p.shape[0] != p.shape[1] or p.shape[0] < 1:
        raise ShapeMismatch(f"cholesky needs a square matrix, got shape {p.shape}")
    scale = float(np.max(np.abs(np.diag(p)))) if p.size else 0.0
    if not np.all(np.isfinite(p)) or scale <= 0.0:
        raise NotPositiveDefinite("matrix has no positive diagonal entry")
    try:
        s = np.linalg.cholesky(p)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    pivots = np.diag(s) ** 2
    if np.any(pivots <= pivot_rtol * scale):
        raise NotPositiveDefinite(f"pivot {pivots.min():.3e} below tolerance")
    return s


def qr_econ_pos(m, rank_rtol=RANK_RTOL):
    """Economy QR of a tall matrix with the diagonal of ``R`` made positive.

    Columns of ``Q`` and rows of ``R`` are flipped together wherever the
    LAPACK factorization produced a negative diagonal entry.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2:
        raise ShapeMismatch(f"expected a matrix, got shape {m.shape}")
    p, q = m.shape
    if p < q:
        raise ShapeMismatch(f"economy QR needs rows >= cols, got {m.shape}")
    qm, rm = np.linalg.qr(m, mode="reduced")
    signs = np.where(np.diag(rm) < 0.0, -1.0, 1.0)
    qm = qm * signs
    rm = rm * signs[:, None]
    tol = rank_rtol * np.linalg.norm(m)
    d = np.diag(rm)
    if not np.all(d > tol):
        raise RankDeficient(f"smallest R diagonal {d.min():.3e} <= {tol:.3e}")
    return QrPair(qm, rm)


def qr_derivative(dm, qp):
    """First-order change of the ``R`` factor for a perturbation ``dm``.

    With ``W = Q^T dm R^{-1}`` the skew part ``Q^T dQ`` is recovered from the
    strictly lower triangle of ``W``; the remainder is the upper-triangular
    ``dR R^{-1}``. ``dm`` may carry leading batch dimensions.
    """
    qm, rm = qp
    dm = np.asarray(dm, dtype=float)
    if dm.shape[-2:] != qm.shape:
        raise ShapeMismatch(f"perturbation shape {dm.shape} does not match {qm.shape}")
    rinv = sla.solve_triangular(rm, np.eye(rm.shape[0]), lower=False)
    w = np.matmul(np.matmul(qm.T, dm), rinv)
    low = np.tril(w, -1)
    upper = w - low + np.swapaxes(low, -1, -2)
    return np.triu(np.matmul(upper, rm))


@functools.lru_cache(maxsize=64)
def tril_indices_colmajor(n):
    """Row and column indices of the lower triangle in column-major order (read-only, cached)."""
    cols, rows = np.triu_indices(n)
    rows.flags.writeable = False
    cols.flags.writeable = False
    return rows, cols


def vectril(m):
    m = np.asarray(m)
    if m.ndim < 2 or m.shape[-1] != m.shape[-2]:
        raise ShapeMismatch(f"vectril needs square input, got {m.shape}")
    rows, cols = tril_indices_colmajor(m.shape[-1])
    return m[..., rows, cols]


def tril_size(n):
    return n * (n + 1) // 2


def tril_dim(length):
    """Inverse of :func:`tril_size`; raises if ``length`` is not triangular."""
    n = int(round((math.sqrt(8 * length + 1) - 1) / 2))
    if tril_size(n) != length:
        raise ShapeMismatch(f"length {length} is not a triangular number")
    return n


def unvectril(v):
    v = np.asarray(v, dtype=float)
    n = tril_dim(v.shape[-1])
    out = np.zeros(v.shape[:-1] + (n, n))
    rows, cols = tril_indices_colmajor(n)
    out[..., rows, cols] = v
    return out


def spectral_norm(m):
    m = np.asarray(m, dtype=float)
    if m.size == 0:
        return 0.0
    return float(np.linalg.norm(np.atleast_2d(m), 2))


def _check_prob(p):
    if not (0.0 < p < 1.0) or math.isnan(p):
        raise DomainError(f"probability must lie in (0, 1), got {p}")


# Acklam's rational approximation, used only as the Newton starting point.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)


def _acklam(p):
    if p < 0.02425:
        t = math.sqrt(-2.0 * math.log(p))
        num = ((((_C[0] * t + _C[1]) * t + _C[2]) * t + _C[3]) * t + _C[4]) * t + _C[5]
        den = (((_D[0] * t + _D[1]) * t + _D[2]) * t + _D[3]) * t + 1.0
        return num / den
    t = p - 0.5
    r = t * t
    num = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * t
    den = ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
    return num / den


def _lower_normal_quantile(p):
    # p <= 0.5, so the lower tail is computed without cancellation
    x = _acklam(p)
    for _ in range(3):
        err = 0.5 * math.erfc(-x / math.sqrt(2.0)) - p
        u = err * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
        x = x - u / (1.0 + 0.5 * x * u)
    return x


def normal_quantile(p):
    """Inverse standard normal CDF."""
    p = float(p)
    _check_prob(p)
    if p == 0.5:
        return 0.0
    if p > 0.5:
        return -_lower_normal_quantile(1.0 - p)
    return _lower_normal_quantile(p)


def chi2_quantile(p, d):
    """Inverse chi-squared CDF with ``d`` degrees of freedom.

    Safeguarded Newton iteration on the regularized incomplete gamma
    function, started from the Wilson-Hilferty approximation.
    """
    p = float(p)
    _check_prob(p)
    if d < 1:
        raise DomainError(f"degrees of freedom must be >= 1, got {d}")
    a = 0.5 * d
    upper = p > 0.5
    target = 1.0 - p if upper else p

    def resid(x):
        return (special.gammaincc(a, 0.5 * x) if upper else special.gammainc(a, 0.5 * x)) - target

    def logpdf(x):
        return (a - 1.0) * math.log(x) - 0.5 * x - a * math.log(2.0) - special.gammaln(a)

    z = normal_quantile(p)
    h = 2.0 / (9.0 * d)
    x = d * (1.0 - h + z * math.sqrt(h)) ** 3
    if not x > 0.0:
        x = max(1e-300, 2.0 * (p * math.exp(special.gammaln(a + 1.0))) ** (1.0 / a))

    lo, hi = 0.0, math.inf
    for _ in range(200):
        f = resid(x)
        # resid is increasing in x for the lower tail, decreasing for the upper
        if (f > 0) != upper:
            hi = x
        else:
            lo = x
        if f == 0.0:
            break
        step = f / math.exp(logpdf(x))
        if upper:
            step = -step
        x_new = x - step
        if not (lo < x_new < hi):
            x_new = 0.5 * (lo + hi) if math.isfinite(hi) else 2.0 * x + 1.0
        if abs(x_new - x) <= 1e-15 * max(1.0, x):
            x = x_new
            break
        x = x_new
    return x
