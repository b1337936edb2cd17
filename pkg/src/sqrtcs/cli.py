"""Command line: ``solve``, ``compare`` and ``mc`` on scenario files.

Exit codes: 0 success, 2 configuration error, 3 backend failure,
4 SCP not converged, 5 missing or unreadable report.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import validate
from .conic import ClarabelBackend
from .config import load_config
from .errors import BackendFailure, ConfigError
from .fullcov import solve_fullcov_unconstrained
from .iterate import Policy
from .reformulate import EoQ
from .scenarios import BUNDLED, bundled_path, prepare
from .scvx import solve

EXIT_OK, EXIT_CONFIG, EXIT_BACKEND, EXIT_NOT_CONVERGED, EXIT_NO_REPORT = 0, 2, 3, 4, 5
REPORT_NAME = "report.json"
log = logging.getLogger("sqrtcs")


def _load(path):
    p = Path(path)
    if not p.exists() and p.suffix == "" and str(path) in BUNDLED:
        p = Path(str(bundled_path(str(path))))
    return load_config(p)


def _backend(cfg):
    return ClarabelBackend(tol=cfg.solver_tol)


def _policy_dict(policy):
    return {"mu": policy.mu.tolist(), "S": policy.S.tolist(), "v": policy.v.tolist(),
            "K": policy.K.tolist(), "L": None if policy.L is None else policy.L.tolist()}


def _policy_from_dict(d):
    return Policy(v=np.array(d["v"]), K=np.array(d["K"]), mu=np.array(d["mu"]), S=np.array(d["S"]),
                  L=None if d.get("L") is None else np.array(d["L"]))


def run_solve(scenario, backend):
    """Solve a prepared scenario; returns ``(policy, report)`` with ``report.status`` set."""
    cfg = scenario.config
    return solve(scenario.problem, cfg.scp, d_x=cfg.d_x, backend=backend, strict=False)


def build_report(scenario, policy, rep):
    cfg, problem = scenario.config, scenario.problem
    out = {
        "scenario": cfg.name,
        "horizon": problem.horizon,
        "converged": rep.status == "converged",
        "status": rep.status,
        "final_cost": rep.final_cost,
        "chi": rep.chi,
        "wall_time_s": rep.wall_time,
        "iterations": [{"dJ": it.dJ, "dL": it.dL, "rho": it.rho, "chi": it.chi, "r": it.r, "w": it.w,
                        "accepted": it.accepted, "cost": it.cost} for it in rep.iterations],
        "trajectories": _policy_dict(policy),
    }
    if rep.status != "backend_failure":
        out["loss_k"] = validate.policy_loss(problem.sys, policy).tolist()
        out["terminal"] = validate.terminal_check(policy.S[-1], problem.p_fin).as_dict()
    return out


def write_trajectories(outdir, policy, pos_idx=(0, 1), nsigma=3.0):
    """``trajectories.csv`` (mean, std, feedforward per node) and ``ellipses.csv`` (3-sigma projections)."""
    outdir = Path(outdir)
    N, n = policy.v.shape[0], policy.mu.shape[1]
    m = policy.v.shape[1]
    P = np.einsum("kij,klj->kil", policy.S, policy.S)
    sd = np.sqrt(np.einsum("kii->ki", P))
    with open(outdir / "trajectories.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k"] + [f"mu{i}" for i in range(n)] + [f"sd{i}" for i in range(n)] + [f"v{j}" for j in range(m)])
        for k in range(N + 1):
            v = policy.v[k].tolist() if k < N else [""] * m
            w.writerow([k] + policy.mu[k].tolist() + sd[k].tolist() + v)
    idx = list(pos_idx)
    with open(outdir / "ellipses.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "point", "x", "y"])
        for k in range(N + 1):
            pts = validate.ellipse_points(policy.mu[k, idx], P[k][np.ix_(idx, idx)], nsigma)
            for j, (x, y) in enumerate(pts):
                w.writerow([k, j, x, y])


def cmd_solve(args):
    cfg = _load(args.config)
    backend = _backend(cfg)
    scenario = prepare(cfg, backend)
    policy, rep = run_solve(scenario, backend)
    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    report = build_report(scenario, policy, rep)
    (outdir / REPORT_NAME).write_text(json.dumps(report, indent=1))
    if rep.status == "backend_failure":
        log.error("backend failure: %s", rep.detail)
        return EXIT_BACKEND
    write_trajectories(outdir, policy)
    print(f"{cfg.name}: {rep.status} in {len(rep.iterations)} iterations, cost {rep.final_cost:.6g}, "
          f"chi {rep.chi:.2e}, {rep.wall_time:.2f} s")
    return EXIT_OK if rep.status == "converged" else EXIT_NOT_CONVERGED


def cmd_compare(args):
    cfg = _load(args.config)
    if not isinstance(cfg.cost, EoQ) or cfg.ccs or cfg.obstacles:
        raise ConfigError("cost", "compare needs an unconstrained EoQ scenario")
    backend = _backend(cfg)
    horizons = cfg.compare_horizons or (cfg.horizon,)
    rows, status = [], EXIT_OK
    for N in horizons:
        scenario = prepare(cfg, backend, horizon=N)
        policy, rep = run_solve(scenario, backend)
        if rep.status == "backend_failure":
            return EXIT_BACKEND
        if rep.status != "converged":
            status = EXIT_NOT_CONVERGED
        base = solve_fullcov_unconstrained(scenario.problem, tol=backend.tol)
        rows.append({"N": N, "cost_sqrt": rep.final_cost, "cost_fullcov": base.cost,
                     "ratio": rep.final_cost / base.cost if base.cost else float("nan"),
                     "iterations": len(rep.iterations), "time_sqrt_s": rep.wall_time,
                     "time_fullcov_s": base.solve_time, "converged": rep.status == "converged"})
        print(f"N={N:4d}  sqrt {rep.final_cost:.8g}  fullcov {base.cost:.8g}  ratio {rows[-1]['ratio']:.6f}  "
              f"({rep.wall_time:.2f} s / {base.solve_time:.2f} s)")
    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "compare.json").write_text(json.dumps({"scenario": cfg.name, "rows": rows}, indent=1))
    with open(outdir / "compare.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return status


def cmd_montecarlo(args):
    cfg = _load(args.config)
    path = Path(args.report)
    try:
        report = json.loads(path.read_text())
        policy = _policy_from_dict(report["trajectories"])
    except (OSError, ValueError, KeyError) as exc:
        log.error("cannot use report %s: %s", path, exc)
        return EXIT_NO_REPORT
    if policy.horizon != cfg.horizon:
        cfg = cfg.with_horizon(policy.horizon)
    samples = args.samples or cfg.mc_samples
    seed = cfg.mc_seed if args.seed is None else args.seed
    t0 = time.perf_counter()
    ens = validate.simulate(cfg.sys, policy, cfg.mu_init, cfg.p_init, samples, seed)
    rates = validate.cc_violation_rates(ens, tuple(cfg.ccs) + tuple(cfg.obstacles))
    summary = {
        "samples": samples,
        "seed": seed,
        "violation_rates": [r.as_dict() | {"allowance": validate.binomial_allowance(r.level, samples),
                                           "pass": bool(r.max_rate <= validate.binomial_allowance(r.level, samples))}
                            for r in rates],
        "envelope": validate.envelope_check(ens, policy),
        "wall_time_s": time.perf_counter() - t0,
    }
    if samples > 1:
        mean_err, cov_err = validate.moment_errors(ens, policy)
        summary["mean_error_sd"] = mean_err.tolist()
        summary["cov_rel_error"] = cov_err.tolist()
        try:
            tol = validate.sample_terminal_tolerance(cfg.sys.n, samples)
            summary["terminal_sample"] = validate.terminal_check(ens, cfg.p_fin, tol).as_dict() | {"tol": tol}
        except ValueError as exc:
            summary["terminal_sample"] = {"error": str(exc)}
    if args.trajectories:
        np.savez_compressed(path.with_name("mc_samples.npz"), states=ens.states, controls=ens.controls)
    report["monte_carlo"] = summary
    path.write_text(json.dumps(report, indent=1))
    worst = max((r.max_rate for r in rates), default=0.0)
    print(f"{cfg.name}: {samples} samples, worst violation rate {worst:.4f}, "
          f"envelope node fraction {summary['envelope']['node_fraction']:.3f}")
    return EXIT_OK


def make_parser():
    p = argparse.ArgumentParser(prog="sqrtcs", description="Square-root covariance steering")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("solve", help="solve a scenario and write a report")
    s.add_argument("config", help="scenario TOML file or bundled name")
    s.add_argument("-o", "--output", required=True, help="output directory")
    s.set_defaults(func=cmd_solve)
    c = sub.add_parser("compare", help="horizon sweep against the full-covariance baseline")
    c.add_argument("config")
    c.add_argument("-o", "--output", required=True)
    c.set_defaults(func=cmd_compare)
    m = sub.add_parser("mc", help="Monte Carlo check of a solved report (appended to it)")
    m.add_argument("config")
    m.add_argument("-r", "--report", required=True)
    m.add_argument("--samples", type=int, default=None)
    m.add_argument("--seed", type=int, default=None)
    m.add_argument("--trajectories", action="store_true", help="also save the sampled trajectories")
    m.set_defaults(func=cmd_montecarlo)
    return p


def main(argv=None):
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BackendFailure as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
