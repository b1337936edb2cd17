"""Per-node decision variables ``(v, L, mu, S)`` of the square-root formulation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ShapeMismatch
from .matfact import tril_size


@dataclass
class Iterate:
    """One SCP reference or solution.

    Shapes: ``v (N, m)``, ``L (N, m, n)``, ``mu (N+1, n)``, ``S (N+1, n, n)``.
    """

    v: np.ndarray
    L: np.ndarray
    mu: np.ndarray
    S: np.ndarray

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=float)
        self.L = np.asarray(self.L, dtype=float)
        self.mu = np.asarray(self.mu, dtype=float)
        self.S = np.asarray(self.S, dtype=float)
        N, m = self.v.shape
        n = self.mu.shape[1]
        if self.L.shape != (N, m, n) or self.mu.shape != (N + 1, n) or self.S.shape != (N + 1, n, n):
            raise ShapeMismatch("iterate blocks have inconsistent shapes")
        if np.any(np.triu(self.S, 1)):
            raise ShapeMismatch("S_k must be lower triangular")

    @property
    def horizon(self):
        return self.v.shape[0]

    @property
    def n(self):
        return self.mu.shape[1]

    @property
    def m(self):
        return self.v.shape[1]

    def block(self, name, k):
        """Block value at node ``k``; vectors come back as columns."""
        if name == "v":
            return self.v[k][:, None]
        if name == "mu":
            return self.mu[k][:, None]
        if name == "L":
            return self.L[k]
        if name == "S":
            return self.S[k]
        raise KeyError(name)

    def copy(self):
        return Iterate(self.v.copy(), self.L.copy(), self.mu.copy(), self.S.copy())


def layout_size(n, m, horizon):
    """Core variable count ``N (m + mn + t) + (N+1)(n + t)``, ``t = n(n+1)/2``, before epigraphs."""
    t = tril_size(n)
    return horizon * (m + m * n + t) + (horizon + 1) * (n + t)


@dataclass
class Policy:
    """Feedforward ``v_k`` and gains ``K_k`` of ``u_k = v_k + K_k (x_k - mu_k)``, with the planned moments."""

    v: np.ndarray
    K: np.ndarray
    mu: np.ndarray
    S: np.ndarray
    L: Optional[np.ndarray] = None

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=float)
        self.K = np.asarray(self.K, dtype=float)
        self.mu = np.asarray(self.mu, dtype=float)
        self.S = np.asarray(self.S, dtype=float)
        N, m = self.v.shape
        n = self.mu.shape[1]
        if self.K.shape != (N, m, n) or self.mu.shape != (N + 1, n) or self.S.shape != (N + 1, n, n):
            raise ShapeMismatch("policy blocks have inconsistent shapes")

    @property
    def horizon(self):
        return self.v.shape[0]
