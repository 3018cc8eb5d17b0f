"""Command line entry point: ``mjlspo {generate,riccati,optimize,gradcheck,verify}``.

Exit codes: 0 ok, 1 check failed, 2 bad arguments or input files, 3 solver
failure, 4 stability precondition violated.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ModelFormatError, ModelValidationError, NotConverged, NotMeanSquareStable
from .model import Policy, generate_random_model, load_model, load_policy, save_model, save_policy
from .oracle import fd_gradient
from .policy_opt import (
    GAUSS_NEWTON,
    VANILLA_PG,
    OptimizerConfig,
    _almost_smoothness,
    _domination_ok,
    _domination_terms,
    _is_certified,
    _lower_bound_ok,
    _UPDATES,
    canonical_method,
    evaluate,
    optimize,
    policy_gradient,
    read_trace,
    reference_from_policy,
    verify_rate_bound,
)
from .stability import SolverConfig, is_ms_stabilizing, solve_coupled_riccati

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_SOLVER = 3
EXIT_UNSTABLE = 4

GRADCHECK_TOL = 1e-5
ALMOST_SMOOTH_TOL = 1e-8
REPLAY_TOL = 1e-8

log = logging.getLogger("mjlspo")


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _margin(text):
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError("margin must lie in (0, 1), got %s" % text)
    return v


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer, got %s" % text)
    return v


def _nonneg_float(text):
    v = float(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0, got %s" % text)
    return v


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be > 0, got %s" % text)
    return v


def _eta(text):
    if text in ("auto", "global"):
        return text
    return _positive_float(text)


def _method(text):
    try:
        return canonical_method(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _load_model(path):
    try:
        return load_model(path)
    except FileNotFoundError as exc:
        raise CliError("model file not found: %s" % path, EXIT_USAGE) from exc
    except (ModelFormatError, ModelValidationError) as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc


def _load_policy(path, m):
    if path == "zero":
        return Policy.zeros(m)
    try:
        return load_policy(path, m)
    except FileNotFoundError as exc:
        raise CliError("policy file not found: %s" % path, EXIT_USAGE) from exc
    except ModelFormatError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc


def _require_stabilizing(m, pi, cfg, what):
    stable, margin = is_ms_stabilizing(m, pi, cfg)
    if not stable:
        raise CliError(
            "%s is not mean-square stabilizing (radius %.12g)" % (what, 1.0 - margin), EXIT_UNSTABLE
        )


def _emit(obj):
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args):
    m = generate_random_model(
        args.modes, args.states, args.inputs, args.seed, args.self_weight, args.margin
    )
    save_model(m, args.out)
    _emit({"out": str(args.out), "n_s": m.n_s, "d": m.d, "k": m.k, "seed": args.seed})
    return EXIT_OK


def cmd_riccati(args):
    m = _load_model(args.model)
    cfg = SolverConfig(tol=args.tol, max_iter=args.max_iter)
    try:
        value, kstar = solve_coupled_riccati(m, cfg)
        ref = reference_from_policy(m, kstar, cfg)
    except NotMeanSquareStable as exc:
        raise CliError("not MS-stabilizable: %s" % exc, EXIT_SOLVER) from exc
    except NotConverged as exc:
        raise CliError(str(exc), EXIT_SOLVER) from exc
    save_policy(kstar, args.out)
    stable, margin = is_ms_stabilizing(m, kstar, cfg)
    _emit(
        {
            "out": str(args.out),
            "residual": value.residual,
            "iterations": value.iterations,
            "cost": ref.cost,
            "chi_star_norm": ref.chi_norm,
            "ms_radius": 1.0 - margin,
        }
    )
    return EXIT_OK


def _summary_path(args):
    if args.summary:
        return Path(args.summary)
    if args.csv:
        return Path(args.csv).with_suffix(".json")
    return None


def cmd_optimize(args):
    m = _load_model(args.model)
    solver = SolverConfig(tol=args.tol)
    pi0 = _load_policy(args.init, m)
    _require_stabilizing(m, pi0, solver, "initial policy")
    ref = None
    if args.ref:
        try:
            ref = reference_from_policy(m, _load_policy(args.ref, m), solver)
        except NotMeanSquareStable as exc:
            raise CliError("reference policy is not stabilizing: %s" % exc, EXIT_UNSTABLE) from exc
    cfg = OptimizerConfig(
        method=args.method,
        eta=args.eta,
        max_iters=args.max_iters,
        rel_gap_tol=args.rel_gap_tol,
        gain_tol=args.gain_tol,
        vanilla_eta=args.vanilla_eta,
        solver=solver,
    )
    try:
        report = optimize(m, pi0, cfg, reference=ref)
    except NotMeanSquareStable as exc:
        raise CliError(str(exc), EXIT_UNSTABLE) from exc
    except NotConverged as exc:
        raise CliError(str(exc), EXIT_SOLVER) from exc
    summary = report.summary()
    summary["init"] = "zero" if args.init == "zero" else str(Path(args.init).resolve())
    summary["tol"] = args.tol
    if args.csv:
        report.write_csv(args.csv)
        summary["csv"] = str(args.csv)
    if args.out:
        save_policy(report.policy, args.out)
        summary["out"] = str(args.out)
    path = _summary_path(args)
    if path is not None:
        path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _emit(summary)
    return EXIT_OK


def cmd_gradcheck(args):
    m = _load_model(args.model)
    pi = _load_policy(args.policy, m)
    solver = SolverConfig()
    _require_stabilizing(m, pi, solver, "policy")
    try:
        fd = fd_gradient(m, pi, args.h)
    except NotMeanSquareStable as exc:
        raise CliError(str(exc), EXIT_UNSTABLE) from exc
    g = policy_gradient(m, pi, solver).grad
    disc = float(np.linalg.norm((fd - g).ravel()) / max(np.linalg.norm(g.ravel()), 1.0))
    ok = disc <= GRADCHECK_TOL
    _emit({"max_rel_discrepancy": disc, "grad_norm": float(np.linalg.norm(g.ravel())), "h": args.h, "pass": ok})
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def _replay(m, rows, method, pi0, solver):
    """Re-run the recorded trajectory; returns the evaluations, one per row."""
    evs = [evaluate(m, pi0, solver)]
    for n, row in enumerate(rows[:-1]):
        eta = row["eta"]
        if eta is None:
            raise CliError("trace row %d has no step size but is not the last row" % n, EXIT_USAGE)
        new_pi = _UPDATES[method](evs[-1], eta)
        try:
            evs.append(evaluate(m, new_pi, solver, warm=evs[-1]))
        except NotMeanSquareStable as exc:
            raise CliError("replayed iterate %d is not stabilizing: %s" % (n + 1, exc), EXIT_UNSTABLE) from exc
    return evs


def cmd_verify(args):
    m = _load_model(args.model)
    try:
        rows = read_trace(args.trace)
    except (OSError, ValueError) as exc:
        raise CliError("cannot read trace: %s" % exc, EXIT_USAGE) from exc
    if not rows:
        raise CliError("trace is empty", EXIT_USAGE)
    summary_path = Path(args.summary) if args.summary else Path(args.trace).with_suffix(".json")
    try:
        summary = json.loads(summary_path.read_text())
    except (OSError, ValueError) as exc:
        raise CliError("cannot read run summary %s: %s" % (summary_path, exc), EXIT_USAGE) from exc
    method = canonical_method(summary["method"])
    solver = SolverConfig(tol=summary.get("tol", 1e-12))
    pi0 = _load_policy(summary.get("init", "zero"), m)

    evs = _replay(m, rows, method, pi0, solver)
    table = []

    def add(name, status, detail=""):
        table.append((name, status, detail))

    worst = max(abs(ev.cost - r["cost"]) / abs(r["cost"]) for ev, r in zip(evs, rows))
    add("replay matches trace", "pass" if worst <= REPLAY_TOL else "FAIL", "max rel cost diff %.2e" % worst)

    cert = [
        _is_certified(method, rows[n]["eta"], evs[n]) if method != VANILLA_PG else False
        for n in range(len(rows) - 1)
    ]
    all_cert = all(cert)
    radii = [r["ms_radius"] for r in rows]
    stable_ok = all(r is not None and r < 1.0 for r in radii)
    if all_cert:
        add("iterates MS-stable", "pass" if stable_ok else "FAIL", "max radius %.6f" % max(radii))
    else:
        add("iterates MS-stable", "uncertified", "%d of %d steps exceed the certified step size"
            % (cert.count(False), len(cert)))

    resid = [_almost_smoothness(evs[n], evs[n + 1]) for n in range(len(evs) - 1)]
    worst = max(resid) if resid else 0.0
    add("almost smoothness", "pass" if worst <= ALMOST_SMOOTH_TOL else "FAIL", "max residual %.2e" % worst)

    lb = [_lower_bound_ok(m, ev) for ev in evs]
    add("cost lower bound", "pass" if all(lb) else "FAIL", "%d/%d iterates" % (sum(lb), len(lb)))

    if args.ref:
        ref = reference_from_policy(m, _load_policy(args.ref, m), solver)
        dom = [all(_domination_ok(_domination_terms(m, ev, ref.cost, ref.chi_norm), ref.cost)) for ev in evs]
        add("gradient domination", "pass" if all(dom) else "FAIL", "%d/%d iterates" % (sum(dom), len(dom)))
        if all_cert:
            rc = verify_rate_bound(rows, m, ref.cost, ref.chi_norm, method)
            if rc.applicable:
                worst = max(rc.residuals) if rc.residuals else 0.0
                add("contraction rate", "pass" if rc.ok else "FAIL", "max residual %.2e" % worst)
            else:
                add("contraction rate", "uncertified", rc.reason)
        else:
            add("contraction rate", "uncertified", "run used uncertified step sizes")
    else:
        add("gradient domination", "skipped", "no --ref given")
        add("contraction rate", "skipped", "no --ref given")

    width = max(len(name) for name, _, _ in table)
    for name, status, detail in table:
        sys.stdout.write("%-*s  %-11s  %s\n" % (width, name, status, detail))
    failed = [name for name, status, _ in table if status not in ("pass", "skipped")]
    if not args.ref:
        sys.stdout.write("notice: rate and gradient-domination rows skipped (no reference policy)\n")
    return EXIT_OK if not failed else EXIT_CHECK_FAILED


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="mjlspo", description="Policy optimization for Markov jump linear systems.")
    p.add_argument("--version", action="version", version="%(prog)s " + __version__)
    p.add_argument("-q", "--quiet", action="store_true", help="suppress per-iteration logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="random model, zero policy MS-stable by construction")
    g.add_argument("--modes", type=_positive_int, default=10, help="number of modes (default 10; full scale 100)")
    g.add_argument("--states", type=_positive_int, default=20, help="state dimension (default 20; full scale 100)")
    g.add_argument("--inputs", type=_positive_int, default=4, help="input dimension (default 4; full scale 20)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--self-weight", type=_nonneg_float, default=99.0, help="Dirichlet self-transition weight (default 99)")
    g.add_argument("--margin", type=_margin, default=0.95, help="MS radius of the zero policy, in (0, 1) (default 0.95)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("riccati", help="solve the coupled Riccati equations, write K*")
    r.add_argument("--model", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--tol", type=_positive_float, default=1e-12)
    r.add_argument("--max-iter", type=_positive_int, default=100_000)
    r.set_defaults(func=cmd_riccati)

    o = sub.add_parser("optimize", help="run Gauss-Newton / natural PG / vanilla PG")
    o.add_argument("--model", required=True)
    o.add_argument("--init", default="zero", help="'zero' or a policy file")
    o.add_argument("--method", type=_method, default=GAUSS_NEWTON, help="gn, npg or pg")
    o.add_argument("--eta", type=_eta, default="auto", help="'auto', 'global' or a number")
    o.add_argument("--max-iters", type=_positive_int, default=1000)
    o.add_argument("--ref", help="K* policy file (enables gap, percent error and rate residuals)")
    o.add_argument("--csv", help="per-iteration trace")
    o.add_argument("--summary", help="summary JSON (default: next to --csv)")
    o.add_argument("--out", help="write the final policy here")
    o.add_argument("--rel-gap-tol", type=_positive_float, default=1e-10)
    o.add_argument("--gain-tol", type=_positive_float, default=None)
    o.add_argument("--vanilla-eta", type=_positive_float, default=1e-4)
    o.add_argument("--tol", type=_positive_float, default=1e-12, help="fixed-point solver tolerance")
    o.set_defaults(func=cmd_optimize)

    c = sub.add_parser("gradcheck", help="compare the exact gradient with central differences")
    c.add_argument("--model", required=True)
    c.add_argument("--policy", required=True, help="policy file or 'zero'")
    c.add_argument("--h", type=_positive_float, default=1e-5)
    c.set_defaults(func=cmd_gradcheck)

    v = sub.add_parser("verify", help="re-check the convergence certificates along a recorded run")
    v.add_argument("--model", required=True)
    v.add_argument("--trace", required=True)
    v.add_argument("--ref")
    v.add_argument("--summary", help="run summary JSON (default: trace path with .json suffix)")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except CliError as exc:
        sys.stderr.write("mjlspo %s: %s\n" % (args.command, exc))
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
