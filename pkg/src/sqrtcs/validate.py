"""Monte Carlo closed-loop simulation and statistical checks of a policy.

Randomness comes from numpy's Philox counter-based generator. Sample ``i``
of a run with seed ``s`` uses key ``s`` and a counter whose top word is
``i``, so every trajectory has its own stream and an ensemble does not
depend on how samples are batched or split across workers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import InvalidParameter, NotPositiveDefinite, ShapeMismatch
from .fullcov import loss_series
from .matfact import cholesky, spectral_norm
from .reformulate import Affine, CcSpec, Norm, ObstacleSpec

TERMINAL_TOL = 1e-6


@dataclass
class McEnsemble:
    """``states (M, N+1, n)`` and ``controls (M, N, m)`` of ``M`` closed-loop runs."""

    samples: int
    seed: int
    states: np.ndarray
    controls: np.ndarray

    def sample_mean(self):
        return self.states.mean(axis=0)

    def sample_cov(self):
        d = self.states - self.states.mean(axis=0)
        return np.einsum("mki,mkj->kij", d, d) / max(self.samples - 1, 1)


def _stream(seed, index):
    counter = np.array([0, 0, 0, index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=int(seed), counter=counter))


def draw_standard_normals(seed, start, count, size):
    """Rows ``start..start+count-1`` of the per-sample standard normal draws (``size`` each)."""
    return np.stack([_stream(seed, i).standard_normal(size) for i in range(start, start + count)])


def simulate(sys, policy, mu_init, p_init, samples, seed):
    """Simulate ``x_{k+1} = A x + B (v + K (x - mu)) + G w`` from ``x_0 ~ N(mu_init, p_init)``.

    ``p_init`` may be singular (e.g. zero); its square root is then taken
    from an eigendecomposition.
    """
    if samples < 1:
        raise InvalidParameter("need at least one sample")
    n, m, N, nw = sys.n, sys.m, sys.horizon, sys.nw
    if policy.horizon != N or policy.K.shape[1:] != (m, n):
        raise ShapeMismatch("policy does not match the system")
    mu_init = np.asarray(mu_init, dtype=float)
    p_init = np.asarray(p_init, dtype=float)
    if mu_init.shape != (n,) or p_init.shape != (n, n):
        raise ShapeMismatch("initial moments do not match the system")
    try:
        root = cholesky(p_init)
    except NotPositiveDefinite:
        evals, evecs = np.linalg.eigh(0.5 * (p_init + p_init.T))
        root = evecs * np.sqrt(np.clip(evals, 0.0, None))

    z = draw_standard_normals(seed, 0, samples, n + N * nw)
    x = mu_init + z[:, :n] @ root.T
    noise = z[:, n:].reshape(samples, N, nw)
    states = np.empty((samples, N + 1, n))
    controls = np.empty((samples, N, m))
    states[:, 0] = x
    for k in range(N):
        u = policy.v[k] + (x - policy.mu[k]) @ policy.K[k].T
        x = x @ sys.a_seq[k].T + u @ sys.b_seq[k].T + noise[:, k] @ sys.g_seq[k].T
        controls[:, k] = u
        states[:, k + 1] = x
    return McEnsemble(samples, int(seed), states, controls)


# ------------------------------------------------------------- chance checks


@dataclass
class ViolationRate:
    label: str
    nodes: tuple
    rates: np.ndarray
    level: float

    @property
    def max_rate(self):
        return float(self.rates.max()) if self.rates.size else 0.0

    def as_dict(self):
        return {"label": self.label, "level": self.level, "max_rate": self.max_rate,
                "nodes": list(self.nodes), "rates": self.rates.tolist()}


def _violations(spec, ensemble):
    N = ensemble.controls.shape[1]
    if isinstance(spec, ObstacleSpec):
        nodes = spec.node_list(N)
        pos = ensemble.states[:, list(nodes)][:, :, list(spec.pos_idx)]
        bad = np.linalg.norm(pos - np.asarray(spec.center, dtype=float), axis=2) < spec.radius
        return nodes, bad, spec.p, f"obstacle c={list(map(float, spec.center))} r={spec.radius}"
    if not isinstance(spec, CcSpec):
        raise TypeError(f"unsupported constraint {type(spec).__name__}")
    nodes = spec.node_list(N)
    data = ensemble.states if spec.target == "state" else ensemble.controls
    vals = data[:, list(nodes)]
    var = spec.variant
    if isinstance(var, Affine):
        bad = vals @ np.asarray(var.alpha, dtype=float) > var.beta
        label = f"{spec.target} affine a={np.asarray(var.alpha).tolist()} b={var.beta}"
    elif isinstance(var, Norm):
        bad = np.linalg.norm(vals, axis=2) > var.gamma
        label = f"{spec.target} norm g={var.gamma}"
    else:
        raise TypeError(f"unsupported variant {type(var).__name__}")
    return nodes, bad, var.p, label


def cc_violation_rates(ensemble, ccs):
    """Empirical violation fraction of each raw chance constraint, per node."""
    out = []
    for spec in ccs:
        nodes, bad, level, label = _violations(spec, ensemble)
        out.append(ViolationRate(label, tuple(nodes), bad.mean(axis=0), float(level)))
    return out


def gaussian_affine_violation(mean, s, alpha, beta):
    """Exact ``P(alpha^T x > beta)`` for ``x ~ N(mean, s s^T)``."""
    alpha = np.asarray(alpha, dtype=float)
    sd = np.linalg.norm(np.asarray(s).T @ alpha)
    margin = beta - alpha @ np.asarray(mean, dtype=float)
    if sd == 0.0:
        return float(margin < 0)
    return float(special.ndtr(-margin / sd))


def binomial_allowance(p, samples, nsigma=3.0):
    """``p + nsigma * sqrt(p (1 - p) / M)``."""
    return p + nsigma * np.sqrt(p * (1.0 - p) / samples)


# ------------------------------------------------------------ terminal check


@dataclass
class TerminalCheck:
    ratio: float
    passed: bool

    def as_dict(self):
        return {"lambda_max_ratio": self.ratio, "pass": self.passed}


def sample_terminal_tolerance(dim, samples):
    """Allowance ``(1 + sqrt(d/M))^2 - 1`` on the largest whitened eigenvalue of a sample covariance.

    This is the asymptotic upper edge of the eigenvalue spectrum of a
    ``d``-dimensional sample covariance from ``M`` Gaussian samples.
    """
    return (1.0 + np.sqrt(dim / samples)) ** 2 - 1.0


def terminal_check(s_or_ensemble, p_fin, tol=TERMINAL_TOL):
    """``lambda_max(P_fin^{-1/2} S S^T P_fin^{-T/2})`` with ``S`` a terminal factor.

    Accepts a factor ``S_N`` or an ensemble, whose terminal sample covariance
    is used. Raises :class:`NotPositiveDefinite` for singular inputs.
    """
    if isinstance(s_or_ensemble, McEnsemble):
        cov = s_or_ensemble.sample_cov()[-1]
        s = cholesky(0.5 * (cov + cov.T))
    else:
        s = np.asarray(s_or_ensemble, dtype=float)
        if s.ndim != 2 or s.shape[0] != s.shape[1]:
            raise ShapeMismatch(f"terminal factor must be square, got {s.shape}")
        if np.linalg.matrix_rank(s) < s.shape[0]:
            raise NotPositiveDefinite("terminal factor is singular")
    s_fin = cholesky(p_fin)
    if s.shape != s_fin.shape:
        raise ShapeMismatch("terminal factor and P_fin differ in size")
    ratio = spectral_norm(np.linalg.solve(s_fin, s)) ** 2
    return TerminalCheck(float(ratio), bool(ratio <= 1.0 + tol))


# -------------------------------------------------------- moments, envelopes


def moment_errors(ensemble, policy):
    """Per node: largest mean error in planned standard deviations, and relative covariance error."""
    mean = ensemble.sample_mean()
    cov = ensemble.sample_cov()
    planned = np.einsum("kij,klj->kil", policy.S, policy.S)
    sd = np.sqrt(np.maximum(np.einsum("kii->ki", planned), 1e-300))
    mean_err = np.max(np.abs(mean - policy.mu) / sd, axis=1)
    cov_err = np.linalg.norm(cov - planned, axis=(1, 2)) / np.linalg.norm(planned, axis=(1, 2))
    return mean_err, cov_err


def envelope_fractions(ensemble, policy, pos_idx=(0, 1), nsigma=3.0):
    """Per node, the fraction of samples inside the ``nsigma`` ellipse of the planned position covariance."""
    idx = list(pos_idx)
    out = np.empty(policy.mu.shape[0])
    for k in range(out.size):
        p2 = (policy.S[k] @ policy.S[k].T)[np.ix_(idx, idx)]
        d = ensemble.states[:, k, idx] - policy.mu[k, idx]
        maha = np.einsum("mi,mi->m", d, np.linalg.solve(p2, d.T).T)
        out[k] = np.mean(maha <= nsigma ** 2)
    return out


def envelope_check(ensemble, policy, pos_idx=(0, 1), nsigma=3.0, sample_frac=0.97, node_frac=0.97):
    """Pass when at least ``node_frac`` of the nodes keep ``sample_frac`` of samples inside the ellipse.

    For a 2-D Gaussian the 3-sigma ellipse holds ``1 - exp(-4.5)``, about
    98.9%, of the mass, so ``sample_frac = 0.97`` leaves binomial room.
    """
    fr = envelope_fractions(ensemble, policy, pos_idx, nsigma)
    good = float(np.mean(fr >= sample_frac))
    return {"node_fraction": good, "min_sample_fraction": float(fr.min()),
            "fractions": fr.tolist(), "pass": bool(good >= node_frac)}


def ellipse_points(mean2, cov2, nsigma=3.0, points=64):
    """Boundary of ``{x : (x - m)^T P^{-1} (x - m) <= nsigma^2}`` as ``(points, 2)``."""
    theta = np.linspace(0.0, 2.0 * np.pi, points)
    circle = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    evals, evecs = np.linalg.eigh(0.5 * (cov2 + cov2.T))
    return np.asarray(mean2) + nsigma * (circle * np.sqrt(np.clip(evals, 0.0, None))) @ evecs.T


def policy_loss(sys, policy):
    """Covariance-propagation loss of a policy's planned ``(K_k, S_k S_k^T)``."""
    covs = np.einsum("kij,klj->kil", policy.S, policy.S)
    return loss_series(sys, policy.K, covs)
