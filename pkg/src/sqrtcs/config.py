"""Scenario configuration files (TOML) and their translation into problems.

A scenario file has the tables ``[dynamics]``, ``[boundary]``, ``[cost]``
and optional ``[[chance]]``, ``[[obstacle]]``, ``[scp]``, ``[trust]``,
``[mc]``, ``[compare]`` and ``[solver]``; the README lists every key.
Matrices are nested arrays; any matrix key ``x`` may instead be given as
``x_diag`` (a list of diagonal entries). Units are part of the key names.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from .errors import ConfigError, SqrtCsError
from .ltv import LtvSystem, build_cwh_zoh, build_double_integrator
from .reformulate import Affine, CcSpec, CsProblem, EoQ, Norm, ObstacleSpec, QoN
from .scvx import ScpParams

DYNAMICS_KINDS = ("double_integrator", "cwh", "explicit")
_SCP_FIELDS = {f.name for f in fields(ScpParams)}


def _get(tbl, key, where, kind=None):
    if key not in tbl:
        raise ConfigError(f"{where}.{key}", "missing required field")
    val = tbl[key]
    if kind is not None and not isinstance(val, kind):
        raise ConfigError(f"{where}.{key}", f"expected {kind.__name__ if isinstance(kind, type) else kind}")
    return val


def _number(tbl, key, where, positive=False):
    val = _get(tbl, key, where)
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(f"{where}.{key}", "expected a number")
    if positive and not val > 0:
        raise ConfigError(f"{where}.{key}", "must be positive")
    return float(val)


def _array(val, name, ndim):
    try:
        arr = np.array(val, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(name, "expected a numeric array") from None
    allowed = ndim if isinstance(ndim, tuple) else (ndim,)
    if arr.ndim not in allowed:
        raise ConfigError(name, f"expected a {ndim}-d array, got shape {arr.shape}")
    return arr


def _matrix(tbl, key, where, required=True):
    if key in tbl:
        return _array(tbl[key], f"{where}.{key}", (2, 3))
    if f"{key}_diag" in tbl:
        return np.diag(_array(tbl[f"{key}_diag"], f"{where}.{key}_diag", 1))
    if required:
        raise ConfigError(f"{where}.{key}", f"missing required field (give {key} or {key}_diag)")
    return None


@dataclass
class ScenarioConfig:
    """Parsed scenario file; ``raw`` keeps the original tree for exact round trips."""

    name: str
    raw: dict
    horizon: int
    sys: LtvSystem
    mu_init: np.ndarray
    mu_fin: np.ndarray
    p_init: np.ndarray
    p_fin: np.ndarray
    cost: object
    ccs: tuple = ()
    obstacles: tuple = ()
    scp: ScpParams = field(default_factory=ScpParams)
    d_x: np.ndarray = None
    mc_samples: int = 1000
    mc_seed: int = 0
    compare_horizons: tuple = ()
    solver_tol: float = None

    def problem(self, extra_ccs=()):
        return CsProblem(self.sys, self.mu_init, self.mu_fin, self.p_init, self.p_fin, self.cost,
                         tuple(self.ccs) + tuple(extra_ccs))

    def with_horizon(self, horizon):
        """Same scenario at another horizon (the dynamics are rebuilt)."""
        raw = copy.deepcopy(self.raw)
        raw["horizon"] = {"N": int(horizon)}
        return parse_config(raw)

    def to_dict(self):
        return copy.deepcopy(self.raw)


def _build_dynamics(tbl, horizon):
    where = "dynamics"
    kind = _get(tbl, "kind", where, str)
    if kind == "double_integrator":
        dim = int(_number(tbl, "dim", where, positive=True))
        q = _number(tbl, "noise_density", where)
        if "total_time_s" in tbl:
            total = _number(tbl, "total_time_s", where, positive=True)
        elif "dt_s" in tbl:
            total = _number(tbl, "dt_s", where, positive=True) * horizon
        else:
            raise ConfigError(f"{where}.total_time_s", "give total_time_s or dt_s")
        return build_double_integrator(dim, horizon, total, q)
    if kind == "cwh":
        return build_cwh_zoh(_number(tbl, "orbit_radius_km", where, positive=True),
                             _number(tbl, "grav_param_km3_s2", where, positive=True),
                             _number(tbl, "dt_s", where, positive=True), horizon,
                             _number(tbl, "accel_noise_km_s1p5", where))
    if kind == "explicit":
        mats = []
        for key in ("a", "b", "g"):
            arr = _array(_get(tbl, key, where), f"{where}.{key}", (2, 3))
            if arr.ndim == 2:
                arr = np.repeat(arr[None], horizon, axis=0)
            if arr.ndim != 3 or arr.shape[0] != horizon:
                raise ConfigError(f"{where}.{key}", f"expected one matrix or {horizon} matrices")
            mats.append(arr)
        try:
            return LtvSystem(*mats)
        except SqrtCsError as exc:
            raise ConfigError(where, str(exc)) from None
    raise ConfigError(f"{where}.kind", f"must be one of {DYNAMICS_KINDS}, got {kind!r}")


def _build_cost(tbl):
    where = "cost"
    kind = _get(tbl, "kind", where, str)
    if kind == "eoq":
        return EoQ(_matrix(tbl, "q", where), _matrix(tbl, "r", where))
    if kind == "qon":
        return QoN(_matrix(tbl, "wx", where), _matrix(tbl, "wu", where), _number(tbl, "p_j", where))
    raise ConfigError(f"{where}.kind", f"must be 'eoq' or 'qon', got {kind!r}")


def _build_cc(tbl, i):
    where = f"chance[{i}]"
    target = _get(tbl, "target", where, str)
    if target not in ("state", "control"):
        raise ConfigError(f"{where}.target", "must be 'state' or 'control'")
    kind = _get(tbl, "kind", where, str)
    p = _number(tbl, "p", where)
    if kind == "affine":
        variant = Affine(_array(_get(tbl, "alpha", where), f"{where}.alpha", 1), _number(tbl, "beta", where), p)
    elif kind == "norm":
        variant = Norm(_number(tbl, "gamma", where, positive=True), p)
    else:
        raise ConfigError(f"{where}.kind", f"must be 'affine' or 'norm', got {kind!r}")
    nodes = tuple(int(k) for k in tbl["nodes"]) if "nodes" in tbl else None
    return CcSpec(target, variant, nodes)


def _build_obstacle(tbl, i):
    where = f"obstacle[{i}]"
    center = _array(_get(tbl, "center", where), f"{where}.center", 1)
    pos_idx = tuple(int(j) for j in tbl.get("pos_idx", (0, 1)))
    if center.shape != (2,) or len(pos_idx) != 2:
        raise ConfigError(where, "obstacles are 2-D: center and pos_idx need two entries")
    return ObstacleSpec(center, _number(tbl, "radius", where, positive=True), _number(tbl, "p", where), pos_idx)


def parse_config(raw, name=None):
    """Validate a configuration tree and build the scenario; raises :class:`ConfigError`."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "expected a table")
    raw = copy.deepcopy(raw)
    name = raw.get("name", name or "scenario")
    horizon = int(_number(_get(raw, "horizon", "<root>", dict), "N", "horizon", positive=True))
    sys = _build_dynamics(_get(raw, "dynamics", "<root>", dict), horizon)
    bnd = _get(raw, "boundary", "<root>", dict)
    mu_init = _array(_get(bnd, "mu_init", "boundary"), "boundary.mu_init", 1)
    mu_fin = _array(_get(bnd, "mu_fin", "boundary"), "boundary.mu_fin", 1)
    p_init = _matrix(bnd, "p_init", "boundary")
    p_fin = _matrix(bnd, "p_fin", "boundary")
    cost = _build_cost(_get(raw, "cost", "<root>", dict))
    ccs = tuple(_build_cc(t, i) for i, t in enumerate(raw.get("chance", [])))
    obstacles = tuple(_build_obstacle(t, i) for i, t in enumerate(raw.get("obstacle", [])))

    scp_tbl = raw.get("scp", {})
    unknown = set(scp_tbl) - _SCP_FIELDS
    if unknown:
        raise ConfigError(f"scp.{sorted(unknown)[0]}", "unknown SCP parameter")
    try:
        scp = ScpParams(**scp_tbl)
    except SqrtCsError as exc:
        raise ConfigError("scp", str(exc)) from None
    d_x = _matrix(raw.get("trust", {}), "d_x", "trust", required=False)
    mc = raw.get("mc", {})
    cmp_tbl = raw.get("compare", {})
    tol = raw.get("solver", {}).get("tol")

    cfg = ScenarioConfig(
        name=name, raw=raw, horizon=horizon, sys=sys, mu_init=mu_init, mu_fin=mu_fin,
        p_init=p_init, p_fin=p_fin, cost=cost, ccs=ccs, obstacles=obstacles, scp=scp, d_x=d_x,
        mc_samples=int(mc.get("samples", 1000)), mc_seed=int(mc.get("seed", 0)),
        compare_horizons=tuple(int(n) for n in cmp_tbl.get("horizons", ())),
        solver_tol=None if tol is None else float(tol),
    )
    try:
        cfg.problem()
    except SqrtCsError as exc:
        raise ConfigError("<problem>", str(exc)) from None
    if d_x is not None and d_x.shape != (sys.n, sys.n):
        raise ConfigError("trust.d_x", f"must be {sys.n} x {sys.n}")
    return cfg


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read: {exc.strerror}") from None
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(str(path), f"invalid TOML: {exc}") from None
    return parse_config(raw, name=path.stem)


def dumps_config(cfg):
    return tomli_w.dumps(cfg.to_dict() if isinstance(cfg, ScenarioConfig) else cfg)


def config_from_problem(problem, name="scenario", scp=None, d_x=None, mc_samples=1000, mc_seed=0):
    """Configuration tree describing ``problem`` with explicit dynamics matrices."""
    sys = problem.sys
    tl = lambda a: np.asarray(a, dtype=float).tolist()  # noqa: E731
    raw = {
        "name": name,
        "horizon": {"N": sys.horizon},
        "dynamics": {"kind": "explicit", "a": tl(sys.a_seq), "b": tl(sys.b_seq), "g": tl(sys.g_seq)},
        "boundary": {"mu_init": tl(problem.mu_init), "mu_fin": tl(problem.mu_fin),
                     "p_init": tl(problem.p_init), "p_fin": tl(problem.p_fin)},
    }
    cost = problem.cost
    if isinstance(cost, EoQ):
        raw["cost"] = {"kind": "eoq", "q": tl(cost.q_seq), "r": tl(cost.r_seq)}
    else:
        raw["cost"] = {"kind": "qon", "wx": tl(cost.wx_seq), "wu": tl(cost.wu_seq), "p_j": float(cost.p_j)}
    chance = []
    for cc in problem.ccs:
        entry = {"target": cc.target, "p": float(cc.variant.p)}
        if isinstance(cc.variant, Affine):
            entry.update(kind="affine", alpha=tl(cc.variant.alpha), beta=float(cc.variant.beta))
        else:
            entry.update(kind="norm", gamma=float(cc.variant.gamma))
        if cc.nodes is not None:
            entry["nodes"] = [int(k) for k in cc.nodes]
        chance.append(entry)
    if chance:
        raw["chance"] = chance
    if scp is not None:
        raw["scp"] = {k: v for k, v in vars(scp).items() if v != getattr(ScpParams(), k)}
    if d_x is not None:
        raw["trust"] = {"d_x": tl(d_x)}
    raw["mc"] = {"samples": int(mc_samples), "seed": int(mc_seed)}
    return raw
