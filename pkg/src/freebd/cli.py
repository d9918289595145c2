"""Config-driven pipeline: build the problem, solve, linearise, audit, classify, write reports.

    freebd run <config> [--strict] [--out DIR]
    freebd check <config> [--strict] [--out DIR]
    freebd study <config> --levels k [--out DIR]

Exit codes: 0 success, 2 configuration error, 3 solver failure or non-convergence,
4 hypothesis violation under --strict.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import energy as en
from . import riemann as rm
from .config import RunConfig, load_config
from .dsl import ParseError, compile_field, variables
from .errors import CoercivityError, ConfigurationError, EvaluationError, FreeBDError
from .freeboundary import classify_all
from .grid import Grid, gradient
from .linearize import linearize, verify_H4_H5
from .solvers import (Solution, complementarity_audit, nonlinear_residual, quadratic_obstacle_residual,
                      solve_nonlinear_vi, solve_quadratic_vi)

__all__ = ["Problem", "RunResult", "build_problem", "run_pipeline", "check_only", "convergence_study",
           "dumps_json", "write_solution_csv", "main",
           "EXIT_OK", "EXIT_CONFIG", "EXIT_SOLVER", "EXIT_HYPOTHESIS"]

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_HYPOTHESIS = 0, 2, 3, 4
MIN_LEVELS = 3


# --------------------------------------------------------------------------- serialisation

def _num(v: float) -> str:
    v = float(v)
    return format(v, ".17g") if math.isfinite(v) else "null"


def dumps_json(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON text with every float written to 17 significant digits; non-finite floats become null."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{_str(str(k))}: {dumps_json(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(isinstance(v, (int, float, np.number, bool, np.bool_)) or v is None for v in obj):
            return "[" + ", ".join(dumps_json(v, indent, _level + 1) for v in obj) + "]"
        items = [pad + dumps_json(v, indent, _level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    if isinstance(obj, np.ndarray):
        return dumps_json(obj.tolist(), indent, _level)
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _num(obj)
    return _str(str(obj))


def _str(s: str) -> str:
    return json.dumps(s, ensure_ascii=False)


def write_solution_csv(path: Path, sol: Solution) -> None:
    grid = sol.grid
    cols = ["i", "x"] if grid.dim == 1 else ["i", "j", "x", "y"]
    cols += ["u", "psi", "w", "zeta", "active", "pde_residual"]
    pts = grid.points
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(cols)
        for idx in np.ndindex(grid.shape):
            row = [str(i) for i in idx] + [_num(c) for c in pts[idx]]
            row += [_num(sol.u[idx]), _num(sol.psi[idx]), _num(sol.u[idx] - sol.psi[idx]),
                    _num(sol.zeta[idx]), "1" if sol.active[idx] else "0", _num(sol.pde_residual[idx])]
            wr.writerow(row)


# --------------------------------------------------------------------------- problem assembly

@dataclass
class Problem:
    cfg: RunConfig
    grid: Grid
    spec: en.EnergySpec
    psi: np.ndarray
    g: np.ndarray
    source: np.ndarray
    A_field: object = None
    metric: rm.Metric | None = None


def _expr(value, dim: int, path: str, allow_z: bool = False):
    """Compile a number or an expression into a callable of points (and z when allowed)."""
    if not isinstance(value, str):
        c = float(value)

        def const(points, z=None):
            return np.full(np.shape(points)[:-1], c)

        const.z_free = True
        return const
    try:
        fn = compile_field(value, dim)
    except ParseError as exc:
        raise ConfigurationError(str(exc), path) from None
    if "z" in variables(fn.expr) and not allow_z:
        raise ConfigurationError("z is not available in this field", path)
    fn.z_free = "z" not in variables(fn.expr)
    return fn


def _matrix(rows, dim: int):
    if rows is None:
        return None
    fns = [[_expr(v, dim, f"problem.A[{i}][{j}]") for j, v in enumerate(r)] for i, r in enumerate(rows)]

    def A(points):
        points = np.asarray(points, dtype=float)
        return np.stack([np.stack([f(points) for f in r], -1) for r in fns], -2)

    return A


def _metric(cfg: RunConfig) -> rm.Metric:
    mc = cfg.problem.metric
    n = cfg.domain.dim
    if mc.preset == "flat":
        return rm.flat(n, mc.r0)
    if mc.preset == "conformal":
        phi = _expr(mc.phi, n, "problem.metric.phi", allow_z=True)
        return rm.conformal(lambda x, z: phi(x, z), n, mc.r0)
    entries = {k: _expr(v, n, f"problem.metric.entries.{k}", allow_z=True) for k, v in mc.entries.items()}
    return rm.from_entries({k: (lambda x, z, f=f: f(x, z)) for k, f in entries.items()}, n, mc.r0)


def _sample(grid: Grid, fn, path: str) -> np.ndarray:
    try:
        return fn(grid.points)
    except EvaluationError as exc:
        raise ConfigurationError(str(exc), path) from None


def build_problem(cfg: RunConfig, resolution: tuple[int, ...] | None = None) -> Problem:
    n = cfg.domain.dim
    grid = Grid.uniform(cfg.domain.bounds, resolution or cfg.domain.shape)
    psi_fn = _expr(cfg.fields.obstacle, n, "fields.obstacle")
    g_fn = _expr(cfg.fields.boundary, n, "fields.boundary")
    f_fn = _expr(cfg.fields.source, n, "fields.source")
    psi = _sample(grid, psi_fn, "fields.obstacle")
    g = _sample(grid, g_fn, "fields.boundary")
    source = _sample(grid, f_fn, "fields.source")
    z_max = float(max(np.abs(psi).max(), np.abs(g).max(), 1.0))
    bounds = [tuple(b) for b in cfg.domain.bounds]
    kind = cfg.problem.kind
    A = _matrix(cfg.problem.A, n)
    metric = None
    has_source = not (not isinstance(cfg.fields.source, str) and float(cfg.fields.source) == 0.0)
    f_arg = (lambda x: f_fn(x)) if has_source else None
    if kind == "quadratic":
        spec = en.quadratic(A, (lambda x: f_fn(x)), n, bounds, z_max)
    elif kind == "p_energy":
        spec = en.p_energy(cfg.problem.p, n, f_arg, z_max, bounds)
    elif kind == "area":
        spec = en.area(n, cfg.problem.xi_max, f_arg, z_max, bounds)
    elif kind == "custom-field":
        a0 = _expr(cfg.problem.a0 if cfg.problem.a0 is not None else 0.0, n, "problem.a0", allow_z=True)
        spec = en.custom_field(A, a0, n, bounds, z_max)
    else:
        metric = _metric(cfg)
        spec = rm.chart_energy(metric)
    return Problem(cfg, grid, spec, psi, g, source, A, metric)


# --------------------------------------------------------------------------- pipeline

@dataclass
class RunResult:
    problem: Problem
    sol: Solution
    h_field: np.ndarray
    report: dict
    freeboundary: dict | None = None
    lin: object = None
    violations: list = field(default_factory=list)
    warnings: list = field(default_factory=list)


def solve(pb: Problem) -> tuple[Solution, np.ndarray]:
    """Solve the obstacle problem; returns the solution and the discrete obstacle residual h."""
    cfg = pb.cfg
    s = cfg.solver
    if s.method == "psor":
        A = pb.A_field if pb.A_field is not None else 1.0
        sol = solve_quadratic_vi(pb.grid, A, pb.source, pb.psi, pb.g, tol=s.tol,
                                 max_iter=s.max_iter or 200000, omega=s.omega)
        h = quadratic_obstacle_residual(pb.grid, A, pb.source, pb.psi)
    else:
        sol = solve_nonlinear_vi(pb.spec, pb.grid, pb.psi, pb.g, tol=s.tol, max_iter=s.max_iter or 200)
        h = nonlinear_residual(pb.spec, pb.grid, pb.psi)
    return sol, h


def _box(pb: Problem) -> en.Box:
    hc = pb.cfg.hypotheses
    if hc.xi_radius is not None:
        r = hc.xi_radius
    elif pb.cfg.problem.kind == "area":
        r = pb.cfg.problem.xi_max
    else:
        r = 1.0
    return en.Box(tuple(tuple(b) for b in pb.cfg.domain.bounds), tuple(hc.z_range), r)


def _hypotheses(pb: Problem, violations: list) -> dict:
    hc = pb.cfg.hypotheses
    rep = en.check_hypotheses(pb.spec, _box(pb), hc.samples)
    for r in rep.records:
        if r.verdict != "pass":
            violations.append(f"{r.name} fails on the sampling box (margin {r.margin:.3g})")
    out = rep.as_dict()
    if pb.metric is not None:
        try:
            s0 = rm.estimate_s0(pb.metric, hc.s0_margin)
            out["s0"] = s0.as_dict()
        except CoercivityError as exc:
            out["s0"] = {"error": str(exc)}
            violations.append(str(exc))
    return out


def run_pipeline(cfg: RunConfig) -> RunResult:
    pb = build_problem(cfg)
    violations: list[str] = []
    warnings: list[str] = []
    hyp = _hypotheses(pb, violations)
    sol, h_field = solve(pb)
    grid = pb.grid
    audit = complementarity_audit(sol, h_field)
    lin = linearize(sol, pb.psi, pb.spec, quad_m=cfg.linearize.quad_nodes, alpha=cfg.hypotheses.alpha)
    c0 = cfg.hypotheses.c0
    hv = verify_H4_H5(lin, sol, 0.0 if c0 is None else c0, cfg.hypotheses.alpha)
    h4 = hv["h4"]
    if c0 is None:
        h4["c0"] = None
        h4["pass"] = bool(np.isfinite(h4["min_h"]) and h4["min_h"] > 0)
    if not h4["pass"]:
        violations.append(f"lower bound on h near the contact set fails (min h = {h4['min_h']:.6g})")
    h5 = hv["h5"]
    if cfg.hypotheses.holder_bound is not None:
        h5["bound"] = cfg.hypotheses.holder_bound
        h5["pass"] = bool(h5["quotient"] <= cfg.hypotheses.holder_bound)
        if not h5["pass"]:
            violations.append(f"Hoelder quotient {h5['quotient']:.6g} exceeds {cfg.hypotheses.holder_bound}")
    K = lin.K
    ell = {"lambda_K": lin.lambda_K, "symmetric": lin.symmetric,
           "eig_min": float(lin.eig_min[K].min()) if K.any() else None,
           "eig_max": float(lin.eig_max[K].max()) if K.any() else None,
           "quad_nodes": lin.quad_m}

    grad_sup = float(np.linalg.norm(gradient(grid, sol.u), axis=-1).max())
    if cfg.problem.kind == "area" and grad_sup > cfg.problem.xi_max:
        warnings.append(f"sup |grad u| = {grad_sup:.6g} leaves the coercivity box |xi| <= {cfg.problem.xi_max}")
    riem = None
    if pb.metric is not None:
        riem = _riemann_report(pb, sol, hyp, warnings, violations)

    fb = None
    if cfg.freeboundary.enabled:
        fbr = classify_all(sol, lin, cfg.freeboundary.radii, cfg.freeboundary.confidence,
                           alpha=cfg.hypotheses.alpha)
        fb = fbr.as_dict()
        warnings.extend(fbr.warnings)

    report = {
        "hypotheses": hyp,
        "ellipticity": ell,
        "h4": h4,
        "h5": h5,
        "complementarity": audit._asdict(),
        "solver": {**sol.summary(), "tol": sol.tol,
                   "final_residual": float(sol.history[-1]) if sol.history else 0.0,
                   "sup_grad_u": grad_sup},
        "grid": grid.describe(),
        "problem": {"kind": cfg.problem.kind, "energy": pb.spec.name},
    }
    if riem is not None:
        report["riemannian"] = riem
    if fb is not None:
        report["freeboundary"] = {"points": len(fb["points"]), "regular": fb["regular_count"],
                                  "ambiguous": fb["ambiguous_count"], "strata_counts": fb["strata_counts"],
                                  "locations": [p["x"] for p in fb["points"]]}
    report["warnings"] = warnings
    report["violations"] = violations
    report["timestamp"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    return RunResult(pb, sol, h_field, report, fb, lin, violations, warnings)


def _riemann_report(pb: Problem, sol: Solution, hyp: dict, warnings: list, violations: list) -> dict:
    grid = pb.grid
    out = {}
    s0 = hyp.get("s0", {}).get("s0")
    gu = gradient(grid, sol.u)
    reach = float((np.abs(grid.points).sum(-1) + np.abs(sol.u) + np.linalg.norm(gu, axis=-1)).max())
    out["sup_x_z_xi"] = reach
    if s0 is not None and reach >= s0:
        warnings.append(f"solution leaves the coercivity box: sup(|x| + |u| + |grad u|) = {reach:.6g} >= s0 = {s0:.6g}")
    nd = rm.reduce_nondivergence(pb.metric, pb.psi, sol, c0=pb.cfg.hypotheses.c0)
    out["ellipticity_violations"] = nd.violations[:20]
    out["n_ellipticity_violations"] = len(nd.violations)
    if nd.violations:
        violations.append(f"non-divergence coefficients lose ellipticity at {len(nd.violations)} nodes")
    inner = grid.collar(1)
    out["min_minus_L_psi"] = float(nd.minus_L_psi[inner].min())
    if nd.q_check:
        out["q_check"] = nd.q_check
        if not nd.q_check["pass"]:
            violations.append(f"q falls below c0/2 (min q = {nd.q_check['q_min']:.6g})")
    return out


def check_only(cfg: RunConfig) -> tuple[dict, list]:
    pb = build_problem(cfg)
    violations: list[str] = []
    hyp = _hypotheses(pb, violations)
    report = {"hypotheses": hyp, "grid": pb.grid.describe(),
              "problem": {"kind": cfg.problem.kind, "energy": pb.spec.name},
              "violations": violations,
              "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds")}
    return report, violations


def convergence_study(cfg: RunConfig, levels: int) -> list[dict]:
    """Sup-norm errors on dyadic refinements of the configured grid, with observed orders.

    The reference is ``study.exact`` when given, otherwise the finest level restricted to
    the coarse nodes (the finest level then carries no error row).
    """
    if levels < MIN_LEVELS:
        raise ConfigurationError(f"need at least {MIN_LEVELS} levels, got {levels}", "levels")
    base = np.array(cfg.domain.shape)
    sols = []
    for k in range(levels):
        pb = build_problem(cfg, tuple(int(v) for v in (base - 1) * 2 ** k + 1))
        sol, _ = solve(pb)
        if not sol.converged:
            raise _NotConverged(f"solver did not converge at level {k}")
        sols.append(sol)
    exact = None
    if cfg.study.exact is not None:
        exact = _expr(cfg.study.exact, cfg.domain.dim, "study.exact")
    rows = []
    n_err = levels if exact is not None else levels - 1
    for k in range(n_err):
        sol = sols[k]
        if exact is not None:
            ref = exact(sol.grid.points)
        else:
            stride = 2 ** (levels - 1 - k)
            ref = sols[-1].u[(slice(None, None, stride),) * sol.grid.dim]
        err = float(np.max(np.abs(sol.u - ref)))
        rows.append({"level": k, "n": int(sol.grid.shape[0]), "h": sol.grid.h, "error": err, "order": None})
    for k in range(1, len(rows)):
        e0, e1 = rows[k - 1]["error"], rows[k]["error"]
        if e0 > 0 and e1 > 0:
            rows[k]["order"] = math.log(e0 / e1) / math.log(rows[k - 1]["h"] / rows[k]["h"])
    return rows


class _NotConverged(FreeBDError):
    pass


# --------------------------------------------------------------------------- command line

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="freebd", description="Obstacle problems: solve, audit, classify.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (("run", "solve and write all reports"),
                           ("check", "audit the structural hypotheses without solving"),
                           ("study", "mesh-refinement study")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("config", help="TOML configuration file")
        sp.add_argument("--out", help="output directory (overrides output.directory)")
        sp.add_argument("--strict", action="store_true", help="exit 4 on any hypothesis violation")
        if name == "study":
            sp.add_argument("--levels", type=int, default=MIN_LEVELS, help="number of dyadic levels")
    return p


def _outdir(cfg: RunConfig, override: str | None) -> Path:
    out = Path(override) if override else Path(cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    return out


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        out = _outdir(cfg, args.out)
        if args.command == "check":
            report, violations = check_only(cfg)
            (out / "report.json").write_text(dumps_json(report) + "\n", encoding="utf-8")
            for v in violations:
                print(f"warning: {v}", file=sys.stderr)
            return EXIT_HYPOTHESIS if args.strict and violations else EXIT_OK
        if args.command == "study":
            rows = convergence_study(cfg, args.levels)
            with open(out / "study.csv", "w", newline="", encoding="utf-8") as fh:
                wr = csv.writer(fh, lineterminator="\n")
                wr.writerow(["level", "n", "h", "error", "order"])
                for r in rows:
                    wr.writerow([r["level"], r["n"], _num(r["h"]), _num(r["error"]),
                                 "" if r["order"] is None else _num(r["order"])])
            for r in rows:
                order = "" if r["order"] is None else f"{r['order']:.3f}"
                print(f"h={r['h']:.6g}  error={r['error']:.6g}  order={order}")
            return EXIT_OK
        res = run_pipeline(cfg)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _NotConverged as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (EvaluationError, CoercivityError) as exc:
        print(f"evaluation error: {exc}", file=sys.stderr)
        return EXIT_SOLVER

    if "csv" in cfg.output.formats:
        write_solution_csv(out / "solution.csv", res.sol)
    if "json" in cfg.output.formats:
        (out / "report.json").write_text(dumps_json(res.report) + "\n", encoding="utf-8")
        if res.freeboundary is not None:
            (out / "freeboundary.json").write_text(dumps_json(res.freeboundary) + "\n", encoding="utf-8")
    for w in res.warnings:
        print(f"warning: {w}", file=sys.stderr)
    for v in res.violations:
        print(f"violation: {v}", file=sys.stderr)
    if not res.sol.converged:
        print("solver did not converge", file=sys.stderr)
        return EXIT_SOLVER
    if args.strict and res.violations:
        return EXIT_HYPOTHESIS
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
