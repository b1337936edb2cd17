"""Linear time-varying Gaussian systems and closed-loop moment propagation.

Closed loop under ``u_k = v_k + K_k (x_k - mu_k)``::

    mu_{k+1} = A_k mu_k + B_k v_k
    P_{k+1}  = (A_k + B_k K_k) P_k (A_k + B_k K_k)^T + G_k G_k^T
    S_{k+1}  = qr(X^T)^T,   X = [A_k S_k + B_k L_k, G_k],   L_k = K_k S_k
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from .errors import InvalidDimension, InvalidParameter, ShapeMismatch
from .matfact import QrPair, qr_derivative, qr_econ_pos, tril_indices_colmajor


@dataclass(frozen=True)
class LtvSystem:
    """Dynamics ``x_{k+1} = A_k x_k + B_k u_k + G_k w_k`` for ``k = 0..N-1``."""

    a_seq: np.ndarray
    b_seq: np.ndarray
    g_seq: np.ndarray

    def __post_init__(self):
        a = np.array(self.a_seq, dtype=float)
        b = np.array(self.b_seq, dtype=float)
        g = np.array(self.g_seq, dtype=float)
        if a.ndim != 3 or b.ndim != 3 or g.ndim != 3:
            raise ShapeMismatch("a_seq, b_seq, g_seq must be stacks of matrices")
        if not (a.shape[0] == b.shape[0] == g.shape[0]) or a.shape[0] < 1:
            raise ShapeMismatch("sequence lengths differ")
        n = a.shape[1]
        if a.shape[2] != n or b.shape[1] != n or g.shape[1] != n:
            raise ShapeMismatch("inconsistent state dimension")
        for arr in (a, b, g):
            arr.setflags(write=False)
        object.__setattr__(self, "a_seq", a)
        object.__setattr__(self, "b_seq", b)
        object.__setattr__(self, "g_seq", g)

    @classmethod
    def time_invariant(cls, a, b, g, horizon):
        a, b, g = (np.asarray(x, dtype=float) for x in (a, b, g))
        rep = lambda x: np.repeat(x[None], horizon, axis=0)  # noqa: E731
        return cls(rep(a), rep(b), rep(g))

    @property
    def n(self):
        return self.a_seq.shape[1]

    @property
    def m(self):
        return self.b_seq.shape[2]

    @property
    def nw(self):
        return self.g_seq.shape[2]

    @property
    def horizon(self):
        return self.a_seq.shape[0]

    def truncated(self, horizon):
        return LtvSystem(self.a_seq[:horizon], self.b_seq[:horizon], self.g_seq[:horizon])


def build_double_integrator(dim, horizon, total_time, noise_density):
    """Time-invariant ``dim``-axis double integrator with step ``total_time / horizon``.

    State is ``[position; velocity]``; ``G = sqrt(q dt) I``.
    """
    if dim not in (1, 2, 3):
        raise InvalidDimension(f"dim must be 1, 2 or 3, got {dim}")
    if horizon < 1:
        raise InvalidDimension(f"horizon must be positive, got {horizon}")
    if total_time <= 0 or noise_density < 0:
        raise InvalidParameter("total_time must be > 0 and noise_density >= 0")
    dt = total_time / horizon
    eye = np.eye(dim)
    zero = np.zeros((dim, dim))
    a = np.block([[eye, dt * eye], [zero, eye]])
    b = np.vstack([0.5 * dt**2 * eye, dt * eye])
    g = np.sqrt(noise_density * dt) * np.eye(2 * dim)
    return LtvSystem.time_invariant(a, b, g, horizon)


def cwh_matrices(mean_motion):
    """Continuous Clohessy-Wiltshire-Hill pair for state ``[r; v]`` (radial, along-track, cross-track)."""
    nn = mean_motion
    a = np.zeros((6, 6))
    a[0:3, 3:6] = np.eye(3)
    a[3, 0] = 3.0 * nn**2
    a[3, 4] = 2.0 * nn
    a[4, 3] = -2.0 * nn
    a[5, 2] = -(nn**2)
    b = np.vstack([np.zeros((3, 3)), np.eye(3)])
    return a, b


def zoh_discretize(a_c, b_c, dt):
    """Exact zero-order-hold discretization via the augmented matrix exponential."""
    n, m = b_c.shape
    aug = np.zeros((n + m, n + m))
    aug[:n, :n] = a_c
    aug[:n, n:] = b_c
    e = sla.expm(aug * dt)
    return e[:n, :n], e[:n, n:]


def build_cwh_zoh(orbit_radius, grav_param, dt, horizon, accel_noise):
    """Clohessy-Wiltshire-Hill relative dynamics with zero-order-hold control.

    Units follow the inputs (e.g. km, km^3/s^2, s, km/s^1.5). Process noise is
    white acceleration, ``G = accel_noise * sqrt(dt)`` on the velocity rows.
    """
    for name, val in (("orbit_radius", orbit_radius), ("grav_param", grav_param),
                      ("dt", dt), ("accel_noise", accel_noise)):
        if not val > 0:
            raise InvalidParameter(f"{name} must be positive, got {val}")
    if horizon < 1:
        raise InvalidParameter(f"horizon must be positive, got {horizon}")
    mean_motion = np.sqrt(grav_param / orbit_radius**3)
    a_d, b_d = zoh_discretize(*cwh_matrices(mean_motion), dt)
    g = np.vstack([np.zeros((3, 3)), accel_noise * np.sqrt(dt) * np.eye(3)])
    return LtvSystem.time_invariant(a_d, b_d, g, horizon)


def _check_k(sys, k):
    if not 0 <= k < sys.horizon:
        raise ShapeMismatch(f"node {k} outside 0..{sys.horizon - 1}")


def propagate_mean(sys, k, mu, v):
    _check_k(sys, k)
    mu = np.asarray(mu, dtype=float)
    v = np.asarray(v, dtype=float)
    if mu.shape != (sys.n,) or v.shape != (sys.m,):
        raise ShapeMismatch(f"mean {mu.shape} / control {v.shape} do not match system")
    return sys.a_seq[k] @ mu + sys.b_seq[k] @ v


def propagate_cov_full(sys, k, p, gain):
    _check_k(sys, k)
    p = np.asarray(p, dtype=float)
    gain = np.asarray(gain, dtype=float)
    if p.shape != (sys.n, sys.n) or gain.shape != (sys.m, sys.n):
        raise ShapeMismatch(f"covariance {p.shape} / gain {gain.shape} do not match system")
    acl = sys.a_seq[k] + sys.b_seq[k] @ gain
    g = sys.g_seq[k]
    out = acl @ p @ acl.T + g @ g.T
    return 0.5 * (out + out.T)


def sqrt_step_matrix(sys, k, s, l):
    """``X_{k+1} = [A_k S_k + B_k L_k, G_k]``."""
    _check_k(sys, k)
    s = np.asarray(s, dtype=float)
    l = np.asarray(l, dtype=float)
    if s.shape != (sys.n, sys.n) or l.shape != (sys.m, sys.n):
        raise ShapeMismatch(f"sqrt covariance {s.shape} / L {l.shape} do not match system")
    return np.hstack([sys.a_seq[k] @ s + sys.b_seq[k] @ l, sys.g_seq[k]])


def propagate_cov_sqrt(sys, k, s, l):
    """Cholesky factor of the next covariance, ``qr(X^T)^T``."""
    return qr_econ_pos(sqrt_step_matrix(sys, k, s, l).T).r.T


def rollout_sqrt(sys, s0, l_seq):
    """Forward square-root recursion; returns the stack ``S_0..S_N``."""
    out = [np.asarray(s0, dtype=float)]
    for k in range(sys.horizon):
        out.append(propagate_cov_sqrt(sys, k, out[-1], l_seq[k]))
    return np.stack(out)


def rollout_mean(sys, mu0, v_seq):
    out = [np.asarray(mu0, dtype=float)]
    for k in range(sys.horizon):
        out.append(propagate_mean(sys, k, out[-1], v_seq[k]))
    return np.stack(out)


@dataclass(frozen=True)
class SqrtStepLinearization:
    """First-order model of one square-root step about a reference ``(S, L)``.

    ``x_ref`` is the full ``n x (n + n_w)`` matrix ``X``; ``qr_ref`` factors
    ``x_ref^T``; ``s_next_ref = qr_ref.r^T``.
    """

    k: int
    x_ref: np.ndarray
    qr_ref: QrPair
    s_next_ref: np.ndarray

    def predict(self, delta_x):
        """Predicted ``S_{k+1}`` for a change ``delta_x`` of ``X`` (or of its first ``n`` columns)."""
        n = self.x_ref.shape[0]
        dx = np.zeros(np.shape(delta_x)[:-2] + self.x_ref.shape)
        dx[..., :, : np.shape(delta_x)[-1]] = delta_x
        dr = qr_derivative(np.swapaxes(dx, -1, -2), self.qr_ref)
        return self.s_next_ref + np.swapaxes(dr, -1, -2)[..., :n, :n]

    def jacobian(self):
        """Matrix mapping row-major ``vec(dX[:, :n])`` to ``vectril`` of the predicted change."""
        n = self.x_ref.shape[0]
        basis = np.eye(n * n).reshape(n * n, n, n)
        dS = self.predict(basis) - self.s_next_ref
        rows, cols = tril_indices_colmajor(n)
        return dS[:, rows, cols].T


def linearize_sqrt_step(sys, k, s_ref, l_ref):
    x_ref = sqrt_step_matrix(sys, k, s_ref, l_ref)
    qp = qr_econ_pos(x_ref.T)
    return SqrtStepLinearization(k=k, x_ref=x_ref, qr_ref=qp, s_next_ref=qp.r.T)
