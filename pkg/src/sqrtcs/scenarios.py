"""Bundled scenarios and the preprocessing that turns a config into a solvable problem.

Circular obstacles are not convex. Each one is replaced by one tangent
halfspace per node, placed at the radial projection of a reference mean
path. The reference comes from a mean-only convex-concave iteration:
start from the straight line (nodes inside a disk are lifted onto its
upper arc), solve the deterministic problem with the current halfspaces,
re-project, and repeat until the path stops moving.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

import numpy as np

from .conic import ClarabelBackend
from .config import ScenarioConfig, load_config
from .errors import BackendFailure, ConfigError
from .reformulate import CsProblem, obstacle_to_halfspaces
from .subproblem import extract_mean, mean_program

BUNDLED = ("double_integrator_3d", "obstacle_2d", "rendezvous_cwh")


def bundled_path(name):
    if name not in BUNDLED:
        raise ConfigError("<name>", f"no bundled scenario {name!r}; choose from {BUNDLED}")
    return resources.files("sqrtcs") / "configs" / f"{name}.toml"


def load_bundled(name):
    with resources.as_file(bundled_path(name)) as path:
        return load_config(path)


def _straight_path(problem, obstacles):
    N = problem.horizon
    pos = {}
    for ob in obstacles:
        idx = list(ob.pos_idx)
        path = np.linspace(problem.mu_init[idx], problem.mu_fin[idx], N + 1)
        d = path - ob.center
        inside = np.linalg.norm(d, axis=1) < ob.radius
        lift = np.sqrt(np.maximum(ob.radius ** 2 - d[inside, 0] ** 2, 0.0))
        path[inside, 1] = ob.center[1] + np.maximum(lift, 1e-3 * ob.radius)
        pos[id(ob)] = path
    return pos


def _halfspaces(problem, obstacles, pos):
    out = []
    for ob in obstacles:
        out += obstacle_to_halfspaces(pos[id(ob)], ob.center, ob.radius, ob.p, problem.sys.n, ob.pos_idx)
    return out


def plan_obstacle_halfspaces(problem, obstacles, backend=None, max_iter=50, tol=1e-6):
    """Per-node tangent halfspaces for every obstacle, from a converged mean-only reference path.

    Returns ``(halfspaces, reference_means)``.
    """
    backend = backend or ClarabelBackend()
    obstacles = tuple(obstacles)
    if not obstacles:
        return [], None
    pos = _straight_path(problem, obstacles)
    mu = None
    for _ in range(max_iter):
        hs = _halfspaces(problem, obstacles, pos)
        prog = mean_program(problem, hs)
        res = backend.solve(prog)
        if res.status not in ("optimal", "optimal_inaccurate"):
            raise BackendFailure(res.status, "obstacle reference pre-solve: " + res.detail)
        _, mu = extract_mean(prog, res)
        new = {id(ob): mu[:, list(ob.pos_idx)] for ob in obstacles}
        step = max(np.abs(new[key] - pos[key]).max() for key in pos)
        pos = new
        if step <= tol:
            break
    return _halfspaces(problem, obstacles, pos), mu


@dataclass
class Scenario:
    """A config with its solvable problem and the raw constraints to check by Monte Carlo."""

    config: ScenarioConfig
    problem: CsProblem
    raw_checks: tuple

    @property
    def horizon(self):
        return self.problem.horizon


def prepare(cfg, backend=None, horizon=None):
    """Build the problem for ``cfg`` (optionally at another horizon), replacing obstacles by halfspaces."""
    if horizon is not None and horizon != cfg.horizon:
        cfg = cfg.with_horizon(horizon)
    base = cfg.problem()
    hs, _ = plan_obstacle_halfspaces(base, cfg.obstacles, backend)
    problem = cfg.problem(extra_ccs=hs) if hs else base
    return Scenario(cfg, problem, tuple(cfg.ccs) + tuple(cfg.obstacles))
