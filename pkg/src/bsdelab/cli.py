"""Command-line surface: configuration, orchestration, and report emission.

Subcommands: simulate, solve, oracle, linear, calculus, analyze, compare,
horizon, suite.  Reports are deterministic JSON (sorted keys, no
timestamps; wall-clock metadata goes to a sidecar .meta.json), so identical
configuration and seed reproduce identical bytes.  A plain-text INI config
file can predefine any flag; explicit flags win.  Exit codes: 0 success,
2 validation error, 3 numeric failure, 4 resource limit.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import apriori_ratio, compute_norms, tree_compare
from .calculus import constants, pred_quad_ratio
from .errors import (ConfigurationError, DomainError, ModelError,
                     NumericError, ResourceError, StateError)
from .linear import LinearCoefficients, linear_solve, normalization_check
from .model import verify_h3prime, verify_lipschitz, verify_monotonicity
from .noise import (JumpActivity, TimeGrid, moment_checks, save_ensemble,
                    simulate, simulate_two_point)
from .oracle import TreeModel, solve_exact
from .registry import MODEL_IDS, TERMINAL_IDS, make_model, make_terminal
from .regression import RegressionBasis
from .solver import (PicardParams, StoppingRule, backward_solve,
                     random_horizon_solve)
from .suite import run_suite

SCHEMA_VERSION = "1.0.0"


def report_schema_version() -> str:
    return SCHEMA_VERSION


# ---------------------------------------------------------------------------
# serialization helpers
# ---------------------------------------------------------------------------


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, (bool, int, float, str)) or obj is None:
        return obj
    return str(obj)


def write_report(path, subcommand: str, config: dict, results: dict) -> dict:
    cfg = _plain(config)
    body = {
        "schema_version": SCHEMA_VERSION,
        "subcommand": subcommand,
        "config": cfg,
        "config_hash": hashlib.sha256(
            json.dumps(cfg, sort_keys=True).encode()).hexdigest(),
        "results": _plain(results),
        "provenance": {
            "package_version": __version__,
            "git_describe": os.environ.get("BSDELAB_GIT_DESCRIBE"),
        },
    }
    text = json.dumps(body, sort_keys=True, indent=1)
    if path:
        Path(path).write_text(text + "\n")
        meta = {"created_utc": datetime.now(timezone.utc).isoformat()}
        Path(str(path) + ".meta.json").write_text(json.dumps(meta) + "\n")
    return body


def export_csv(path, grid, sol) -> None:
    """Time-indexed means of Y, Z, psi and M components, one row per node."""
    n = grid.n_steps
    cols = {}
    d = sol.Y.shape[2]
    for c in range(d):
        cols[f"Y_mean_{c}"] = sol.Y[:, :, c].mean(axis=0)
        cols[f"M_mean_{c}"] = sol.M[:, :, c].mean(axis=0)
    for c in range(d):
        for l in range(sol.Z.shape[3]):
            cols[f"Z_mean_{c}_{l}"] = sol.Z[:, :, c, l].mean(axis=0)
        for j in range(sol.psi.shape[3]):
            cols[f"psi_mean_{c}_{j}"] = sol.psi[:, :, c, j].mean(axis=0)
    names = sorted(cols)
    with open(path, "w") as fh:
        fh.write(",".join(["t"] + names) + "\n")
        for i in range(n + 1):
            row = [repr(float(grid.times[i]))]
            for name in names:
                v = cols[name]
                row.append(repr(float(v[i])) if i < len(v) else "")
            fh.write(",".join(row) + "\n")
    return cols


def _render_figures(args, grid, sol, csv_cols) -> str | None:
    if not args.csv or args.no_figures:
        return None
    from .figures import render_mean_paths
    out = str(args.csv) + ".png"
    return render_mean_paths(grid.times, csv_cols, out)


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------


def parse_atoms(text: str) -> JumpActivity:
    """"mark:intensity[,mark:intensity...]" or "" for no jumps."""
    if not text:
        return JumpActivity.empty()
    atoms = []
    for part in text.split(","):
        mark, _, lam = part.partition(":")
        if not lam:
            raise ConfigurationError(
                f"config key 'atoms': expected mark:intensity, got {part!r}")
        atoms.append((float(mark), float(lam)))
    return JumpActivity.from_list(atoms)


def parse_grid(text: str):
    try:
        n, horizon = text.split(",")
        return TimeGrid.uniform(int(n), float(horizon))
    except ValueError as exc:
        raise ConfigurationError(
            f"config key 'grid': expected n,T (e.g. 16,1.0), got {text!r}") from exc


def _build_problem(args):
    activity = parse_atoms(args.atoms)
    spec = make_model(args.model, activity, k=args.k,
                      alpha=args.alpha, lip_K=args.lip_k)
    xi = make_terminal(args.terminal, d=spec.d)
    return activity, spec, xi


def _basis_from(args):
    return RegressionBasis.parse(args.basis) if args.basis else None


def _params_from(args):
    kwargs = {}
    if args.beta is not None:
        kwargs["beta"] = args.beta
    if args.tol is not None:
        kwargs["tol_beta"] = args.tol
    return PicardParams(**kwargs)


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------


def cmd_simulate(args):
    grid = parse_grid(args.grid)
    activity = parse_atoms(args.atoms)
    sim = simulate_two_point if args.two_point else simulate
    ens = sim(grid, args.k, activity, args.paths, args.seed)
    checks = moment_checks(ens, activity)
    if args.ensemble_out:
        save_ensemble(args.ensemble_out, ens)
    return {"moments": checks, "law": ens.law,
            "ensemble_file": str(args.ensemble_out) if args.ensemble_out else None}


def cmd_solve(args):
    grid = parse_grid(args.grid)
    activity, spec, xi = _build_problem(args)
    mono = verify_monotonicity(spec, n_samples=2000)
    lip = verify_lipschitz(spec, n_samples=2000)
    if not (mono.passed and lip.passed):
        raise ModelError(
            "declared constants failed verification: "
            f"(H1) max ratio {mono.observed:.4g} vs alpha = {spec.alpha}; "
            f"(H3) max ratio {lip.observed:.4g} vs K = {spec.lip_K}")
    ens = simulate(grid, args.k, activity, args.paths, args.seed)
    sol = backward_solve(spec, xi, ens, basis=_basis_from(args),
                         params=_params_from(args))
    norms = compute_norms(sol, spec, xi, p=args.p, ensemble=ens)
    csv_cols = export_csv(args.csv, grid, sol) if args.csv else None
    fig = _render_figures(args, grid, sol, csv_cols) if csv_cols else None
    if getattr(args, "solution_out", None):
        from .solver import save_solution
        save_solution(args.solution_out, sol)
    return {
        "Y_0": _plain(sol.y0.tolist() if sol.y0.size > 1 else float(sol.y0[0])),
        "Y_0_se": sol.y0_se,
        "hypothesis_checks": {"H1_max_ratio": mono.observed,
                              "H3_max_ratio": lip.observed},
        "norms": vars(norms) | {"lhs": norms.lhs, "rhs": norms.rhs},
        "apriori_ratio": vars(apriori_ratio(norms)),
        "provenance": sol.provenance,
        "csv": str(args.csv) if args.csv else None,
        "figure": fig,
    }


def cmd_oracle(args):
    activity, spec, xi = _build_problem(args)
    tree = TreeModel(n_steps=args.steps, dt=args.dt, k=args.k,
                     activity=activity, budget=args.budget)
    sol = solve_exact(tree, spec, xi)
    out = {
        "Y_0": sol.y0.tolist() if sol.y0.size > 1 else float(sol.y0[0]),
        "identity_residual": sol.identity_residual(),
        "orthogonality_max": sol.orthogonality_max(),
        "norms_p2": sol.pathwise_norms(2.0),
    }
    if args.tree_json:
        Path(args.tree_json).write_text(sol.to_json() + "\n")
        out["tree_json"] = str(args.tree_json)
    return out


def cmd_linear(args):
    grid = parse_grid(args.grid)
    activity = parse_atoms(args.atoms)
    xi = make_terminal(args.terminal)
    coeffs = LinearCoefficients.build(
        xi, alpha=args.lin_alpha, beta=args.lin_beta, gamma=args.lin_gamma,
        forcing=args.forcing, k=args.k, activity=activity)
    ens = simulate(grid, args.k, activity, args.paths, args.seed)
    sol = linear_solve(coeffs, ens, method=args.method)
    norm = normalization_check(coeffs, ens, method=args.method)
    return {"Y_0": sol.y0, "Y_0_se": sol.y0_se,
            "negative_gamma_count": sol.negative_count,
            "normalization": norm, "method": args.method}


def cmd_calculus(args):
    from .suite import criterion_ito
    res = criterion_ito()
    c = constants(args.p, K=args.lip_k or 0.0, alpha=args.alpha or 0.0)
    # empirical projection/variation moment ratio: no asserted bound exists
    act = parse_atoms(args.atoms) if args.atoms else JumpActivity.single(1.0)
    ens = simulate(TimeGrid.uniform(16, 1.0), args.k, act, args.paths, args.seed)
    sol = backward_solve(make_model("jumplin", act), make_terminal("count1"), ens)
    sol.jump_counts = ens.jump_counts
    ratio = pred_quad_ratio(sol, args.p) if args.p < 2 else pred_quad_ratio(sol, 1.5)
    return {"passed": res.passed, "checks": res.details, "constants": vars(c),
            "pred_quad_ratio_empirical": ratio}


def cmd_analyze(args):
    out = cmd_solve(args)
    if args.battery:
        from .analysis import fitted_constant
        from .battery import MC_BATTERY, build_mc_case
        from .solver import backward_solve as _solve
        reports = []
        for case in MC_BATTERY:
            ens, spec, xi, act = build_mc_case(case, args.paths, args.seed)
            sol = _solve(spec, xi, ens)
            reports.append(compute_norms(sol, spec, xi, p=args.p, ensemble=ens))
        out["battery_fitted_constant"] = fitted_constant(reports)
        out["battery_ratios"] = {case.name: apriori_ratio(rep).ratio
                                 for case, rep in zip(MC_BATTERY, reports)}
    return out


def cmd_compare(args):
    activity = parse_atoms(args.atoms)
    spec1 = make_model(args.model, activity, k=args.k,
                       alpha=args.alpha, lip_K=args.lip_k)
    spec2 = make_model(args.model2, activity, k=args.k)
    xi1 = make_terminal(args.terminal)
    xi2 = make_terminal(args.terminal2)
    tree = TreeModel(n_steps=args.steps, dt=args.dt, k=args.k, activity=activity)
    sol1 = solve_exact(tree, spec1, xi1)
    sol2 = solve_exact(tree, spec2, xi2)
    h3 = verify_h3prime(spec2, n_samples=2000) if spec2.comp is not None else None
    rep = tree_compare(sol1, sol2, spec1, spec2, h3prime_report=h3)
    return {"violations": rep.violations, "worst_margin": rep.worst_margin,
            "witness": rep.witness, "tolerance": rep.tolerance,
            "hypotheses": rep.hypotheses, "nodes_checked": rep.checked}


def cmd_horizon(args):
    activity, spec, xi = _build_problem(args)
    n_steps = int(round(args.tmax * args.steps_per_unit))
    grid = TimeGrid.uniform(n_steps, args.tmax)
    ens = simulate(grid, args.k, activity, args.paths, args.seed)
    rule = StoppingRule.parse(args.tau, t_max=args.tmax)
    res = random_horizon_solve(spec, xi, rule, rho=args.rho, p=args.p,
                               n_max=args.nmax, ensemble=ens,
                               basis=_basis_from(args), params=_params_from(args))
    return {
        "Y_0_sequence": res.y0,
        "cauchy_distances": res.distances,
        "rho": res.rho, "nu": res.nu,
        "tau_mean": float(res.tau.mean()),
        "capped_fraction": float(np.mean(res.tau >= args.tmax - 1e-12)),
    }


def cmd_suite(args):
    res = run_suite()
    for c in res["criteria"]:
        mark = "PASS" if c["passed"] else "FAIL"
        print(f"[{mark}] {c['name']} ({c['seconds']:.2f}s)")
    # wall-clock seconds stay on stdout; the report must be byte-reproducible
    report = {"passed": res["passed"],
              "criteria": [{k: v for k, v in c.items() if k != "seconds"}
                           for c in res["criteria"]]}
    if not res["passed"]:
        write_report(args.out, "suite", {"seed": args.seed}, report)
        raise NumericError("acceptance suite failed; see the report for details")
    return report


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_common(p, paths_default=10_000):
    p.add_argument("--atoms", default="",
                   help="jump atoms as mark:intensity[,mark:intensity...]")
    p.add_argument("--k", type=int, default=1, help="Brownian dimension")
    p.add_argument("--paths", type=int, default=paths_default)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="report JSON path")
    p.add_argument("--threads", type=int,
                   default=int(os.environ.get("BSDELAB_THREADS", "1")),
                   help="worker threads (default from BSDELAB_THREADS); "
                        "execution is vectorized and numerically identical "
                        "for every value")


def _add_model(p):
    p.add_argument("--model", required=True,
                   help=f"model id ({', '.join(MODEL_IDS)})")
    p.add_argument("--terminal", default="one",
                   help=f"terminal id ({', '.join(TERMINAL_IDS)})")
    p.add_argument("--alpha", type=float, default=None,
                   help="declared monotonicity constant (expr models)")
    p.add_argument("--lip-k", type=float, default=None,
                   help="declared (z, psi) Lipschitz constant (expr models)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="bsdelab",
        description="Numerical laboratory for BSDEs driven by Brownian, "
                    "Poisson and orthogonal noise")
    ap.add_argument("--config", default=None,
                    help="INI file with per-subcommand defaults; flags win")
    sub = ap.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("simulate", help="sample and persist a noise ensemble")
    _add_common(p)
    p.add_argument("--grid", default="16,1.0")
    p.add_argument("--two-point", action="store_true")
    p.add_argument("--ensemble-out", default=None)
    p.set_defaults(fn=cmd_simulate)

    for name, helptext in (("solve", "regression backward solver"),
                           ("analyze", "solve then report norms and ratios")):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        _add_model(p)
        p.add_argument("--grid", default="16,1.0")
        p.add_argument("--basis", default=None,
                       help="poly:<deg>[:feats] or cube:<width>[:feats]")
        p.add_argument("--beta", type=float, default=None)
        p.add_argument("--tol", type=float, default=None)
        p.add_argument("--p", type=float, default=2.0)
        p.add_argument("--csv", default=None,
                       help="write time-indexed component means as CSV")
        p.add_argument("--no-figures", action="store_true",
                       help="skip the PNG rendered alongside the CSV")
        p.add_argument("--solution-out", default=None,
                       help="persist the solution quadruple (columnar + "
                            "provenance sidecar)")
        if name == "analyze":
            p.add_argument("--battery", action="store_true",
                           help="also fit the empirical constant over the "
                                "standard battery")
        p.set_defaults(fn=cmd_solve if name == "solve" else cmd_analyze)

    p = sub.add_parser("oracle", help="exact tree solve")
    _add_common(p)
    _add_model(p)
    p.add_argument("--steps", type=int, default=4)
    p.add_argument("--dt", type=float, default=0.25)
    p.add_argument("--budget", type=int, default=2_000_000)
    p.add_argument("--tree-json", default=None)
    p.set_defaults(fn=cmd_oracle)

    p = sub.add_parser("linear", help="stochastic-exponential representation")
    _add_common(p)
    p.add_argument("--grid", default="32,1.0")
    p.add_argument("--terminal", default="one")
    p.add_argument("--lin-alpha", type=float, default=0.0)
    p.add_argument("--lin-beta", type=float, default=0.0)
    p.add_argument("--lin-gamma", type=float, default=0.0)
    p.add_argument("--forcing", type=float, default=0.0)
    p.add_argument("--method", choices=("euler", "exp", "display"), default="euler")
    p.set_defaults(fn=cmd_linear)

    p = sub.add_parser("calculus", help="Ito |x|^p residual and bound suites")
    _add_common(p, paths_default=1000)
    p.add_argument("--p", type=float, default=1.5)
    p.add_argument("--alpha", type=float, default=0.0)
    p.add_argument("--lip-k", type=float, default=0.0)
    p.set_defaults(fn=cmd_calculus)

    p = sub.add_parser("compare", help="comparison principle on a tree")
    _add_common(p)
    _add_model(p)
    p.add_argument("--model2", required=True)
    p.add_argument("--terminal2", default="one")
    p.add_argument("--steps", type=int, default=4)
    p.add_argument("--dt", type=float, default=0.2)
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("horizon", help="random-terminal-time ladder")
    _add_common(p)
    _add_model(p)
    p.add_argument("--tau", required=True,
                   help="det:<t> | jump:<atom> | exit:<coord>,<lo>,<hi>")
    p.add_argument("--rho", type=float, required=True)
    p.add_argument("--p", type=float, default=2.0)
    p.add_argument("--tmax", type=float, default=4.0)
    p.add_argument("--nmax", type=int, default=4)
    p.add_argument("--steps-per-unit", type=int, default=64)
    p.add_argument("--basis", default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--tol", type=float, default=None)
    p.set_defaults(fn=cmd_horizon)

    p = sub.add_parser("suite", help="run the acceptance battery")
    _add_common(p, paths_default=10_000)
    p.set_defaults(fn=cmd_suite)
    return ap


def _apply_config(ap: argparse.ArgumentParser, argv):
    """Pre-scan for --config and fold INI values into the argument list.

    Sections: [common] applies everywhere, [<subcommand>] to that command.
    Values for flags already present on the command line are ignored, so
    explicit flags always win.  Boolean keys use true/false.
    """
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config", default=None)
    known, rest = probe.parse_known_args(argv)
    if not known.config:
        return argv
    ini = configparser.ConfigParser()
    read = ini.read(known.config)
    if not read:
        raise ConfigurationError(f"config file {known.config!r} not found")
    sub_name = next((a for a in rest if not a.startswith("-")), None)
    merged = {}
    for section in ("common", sub_name or ""):
        if section and ini.has_section(section):
            for key, val in ini.items(section):
                merged[key.replace("-", "_")] = val
    extra = []
    for key, val in merged.items():
        flag = "--" + key.replace("_", "-")
        if flag in rest or any(a.startswith(flag + "=") for a in rest):
            continue
        if val.lower() in ("true", "yes", "1") and key in ("two_point", "no_figures"):
            extra.append(flag)
        elif val.lower() in ("false", "no", "0") and key in ("two_point", "no_figures"):
            continue
        else:
            extra.extend([flag, val])
    if sub_name is None:
        return rest + extra
    i = rest.index(sub_name)
    return rest[: i + 1] + extra + rest[i + 1:]


EXIT_VALIDATION = 2
EXIT_NUMERIC = 3
EXIT_RESOURCE = 4


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    try:
        argv = _apply_config(ap, argv)
        args = ap.parse_args(argv)
        if args.threads is not None and args.threads < 1:
            raise ConfigurationError("config key 'threads' must be >= 1")
        t0 = time.perf_counter()
        results = args.fn(args)
        runtime = time.perf_counter() - t0
        # output locations and the thread knob are not part of the experiment
        # identity: the report must be byte-identical for identical
        # config + seed, and across thread counts
        excluded = ("fn", "config", "out", "csv", "ensemble_out", "tree_json",
                    "solution_out", "threads")
        config = {k: v for k, v in vars(args).items()
                  if k not in excluded and v is not None}
        body = write_report(args.out, args.subcommand, config, results)
        if args.out:
            Path(str(args.out) + ".meta.json").write_text(json.dumps(
                {"created_utc": datetime.now(timezone.utc).isoformat(),
                 "runtime_seconds": runtime}) + "\n")
            print(f"report written to {args.out}")
        elif args.subcommand != "suite":
            print(json.dumps(body["results"], sort_keys=True, indent=1))
        return 0
    except (ConfigurationError, DomainError, ModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericError, StateError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ResourceError as exc:
        print(f"resource limit: {exc}", file=sys.stderr)
        return EXIT_RESOURCE


if __name__ == "__main__":
    sys.exit(main())
