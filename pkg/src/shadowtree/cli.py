"""Command-line front end.

Exit codes: 0 every check passed, 1 operational failure (bad input, I/O,
non-convergence), 2 a verification check failed. Reports are JSON with a
``"schema": "1"`` field; non-finite floats are written as the strings
``"inf"``, ``"-inf"`` and ``"nan"``.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any

import numpy as np

from . import bs_example as bs
from . import shadow as sh
from ._program import SolverError
from .friction_solver import (
    KKT_TOL,
    TradePlan,
    check_admissible,
    dp_martingale_residuals,
    solve_primal,
)
from .frictionless_solver import PriceAssignment, solve_frictionless
from .market import EndowmentSpec, load_endowment, load_tree
from .utility import UtilitySpec

SCHEMA = "1"
EXIT_OK, EXIT_OPERATIONAL, EXIT_VERIFICATION = 0, 1, 2
DP_TOL = 1e-6
METHOD_RTOL = 1e-4


class VerificationFailed(Exception):
    def __init__(self, report: dict):
        super().__init__("verification failed")
        self.report = report


def _clean(obj: Any) -> Any:
    if isinstance(obj, float):
        if math.isfinite(obj):
            return obj
        return "nan" if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return _clean(obj.item())
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def dumps(report: dict) -> str:
    return json.dumps(_clean(report), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _read_json(source: str) -> Any:
    p = Path(source)
    if p.exists():
        return json.loads(p.read_text())
    try:
        return json.loads(source)
    except json.JSONDecodeError:
        raise FileNotFoundError(f"no such file: {source}") from None


def _utility(source: str) -> UtilitySpec:
    return UtilitySpec.from_config(_read_json(source))


def _endow(source: str | None) -> EndowmentSpec:
    if source is None:
        return EndowmentSpec(1.0, {})
    return load_endowment(source)


def _tolerances(args) -> sh.Tolerances:
    return sh.Tolerances(
        sandwich=args.sandwich_tol,
        supermartingale=args.supermartingale_tol,
        residual_rtol=args.residual_rtol,
        gap_rtol=args.gap_rtol,
        dominance=args.dominance_tol,
        trade=args.trade_tol,
    )


def _emit(report: dict, args) -> None:
    text = dumps(report)
    if getattr(args, "out", None):
        Path(args.out).write_text(text)
    if getattr(args, "json", False):
        sys.stdout.write(text)
    else:
        sys.stdout.write(summarize(report))


def summarize(report: dict) -> str:
    """Human-readable digest of a JSON report."""
    lines = [f"[{report.get('command', '?')}] status: {report.get('status', '?')}"]
    for key in ("value", "frictionless_value", "gap", "dual_bound"):
        if key in report:
            lines.append(f"  {key}: {report[key]}")
    for name, ok in sorted(report.get("checks", {}).items()):
        lines.append(f"  {'PASS' if ok else 'FAIL'}  {name}")
    if "error" in report:
        lines.append(f"  error: {report['error']}")
    return "\n".join(lines) + "\n"


def _status(checks: dict[str, bool]) -> str:
    return "pass" if all(checks.values()) else "fail"


# ---------------------------------------------------------------------------
# subcommands


def cmd_solve(args) -> dict:
    tree = load_tree(args.tree)
    util = _utility(args.utility)
    endow = _endow(args.endow)
    rep = solve_primal(tree, util, endow)
    if not rep.converged:
        raise SolverError(f"primal solve did not converge (kkt residual {rep.kkt_residual:.3g})")
    doc = rep.to_document()
    doc.update(command="solve", status="pass", tolerances={"kkt": KKT_TOL})
    return doc


def cmd_solve_frictionless(args) -> dict:
    tree = load_tree(args.tree)
    util = _utility(args.utility)
    endow = _endow(args.endow)
    prices = PriceAssignment.from_document(_read_json(args.prices))
    rep = solve_frictionless(tree, prices, util, endow)
    if not rep.converged:
        raise SolverError(f"frictionless solve did not converge (kkt residual {rep.kkt_residual:.3g})")
    doc = rep.to_document()
    doc.update(command="solve-frictionless", status="pass", tolerances={"kkt": KKT_TOL},
               spread_violations=[list(v) for v in prices.spread_violations(tree)])
    return doc


def cmd_shadow(args) -> dict:
    tree = load_tree(args.tree)
    util = _utility(args.utility)
    endow = _endow(args.endow)
    rep = solve_primal(tree, util, endow)
    if not rep.converged:
        raise SolverError("primal solve did not converge")
    tol = _tolerances(args)
    try:
        cps = sh.construct_cps(tree, util, endow, rep, args.method, args.eps, verify=False)
    except sh.CPSError as exc:
        raise VerificationFailed({"command": "shadow", "status": "fail", "error": str(exc),
                                  "diagnostics": exc.diagnostics})
    chk = sh.check_cps(tree, cps, tol.sandwich, tol.supermartingale)
    doc = cps.to_document()
    checks = {"cps_invariants": chk.passed}
    doc.update(command="shadow", checks=checks, status=_status(checks), cps_check=asdict(chk),
               value=rep.value, tolerances=asdict(tol))
    return doc


def _verify_doc(tree, util, endow, report, cps, tol, seed) -> dict:
    suite = sh.verification_suite(tree, util, endow, report, cps, seed=seed, tol=tol)
    doc = suite.to_document()
    violations = check_admissible(tree, report.plan, endow)
    doc["checks"]["plan_admissible"] = not violations
    doc["admissibility_violations"] = [asdict(v) for v in violations]
    return doc


def cmd_verify(args) -> dict:
    tree = load_tree(args.tree)
    util = _utility(args.utility)
    endow = _endow(args.endow)
    cps = sh.CPSPair.from_document(_read_json(args.cps))
    plan = TradePlan.from_document(_read_json(args.plan))
    tol = _tolerances(args)
    missing = [n.id for n in tree.nodes if n.id not in cps.z0 or n.id not in cps.z1]
    if missing:
        raise ValueError(f"cps has no value at {len(missing)} node(s), e.g. {missing[0]!r}")
    report = sh.plan_report(tree, util, endow, plan)
    doc = _verify_doc(tree, util, endow, report, cps, tol, args.seed)
    doc.update(command="verify", status=_status(doc["checks"]), tolerances=asdict(tol))
    return doc


def cmd_pipeline(args) -> dict:
    tree = load_tree(args.tree)
    util = _utility(args.utility)
    endow = _endow(args.endow)
    tol = _tolerances(args)
    rep = solve_primal(tree, util, endow)
    if not rep.converged:
        raise SolverError("primal solve did not converge")
    try:
        cps = sh.construct_cps(tree, util, endow, rep, args.method, args.eps, verify=False)
        kkt = cps if args.method == "kkt" else sh.kkt_cps(tree, util, endow, rep, verify=False)
    except sh.CPSError as exc:
        raise VerificationFailed({"command": "pipeline", "status": "fail", "error": str(exc),
                                  "diagnostics": exc.diagnostics})
    doc = _verify_doc(tree, util, endow, rep, cps, tol, args.seed)
    dp = dp_martingale_residuals(tree, util, endow, rep.plan)
    dp_worst = max(dp.values(), default=0.0)
    dis = sh.method_disagreement(tree, rep.plan, cps, kkt)
    dis_worst = max(dis.values(), default=0.0)
    doc["checks"]["dp_martingale"] = dp_worst <= DP_TOL
    doc["checks"]["method_agreement_at_trades"] = dis_worst <= METHOD_RTOL
    doc.update(
        command="pipeline",
        status=_status(doc["checks"]),
        method=cps.method,
        epsilon_used=cps.epsilon_used,
        plan=rep.plan.to_document(),
        kkt_residual=rep.kkt_residual,
        dp_martingale_worst=dp_worst,
        method_disagreement=dis,
        tolerances={**asdict(tol), "dp_martingale": DP_TOL, "method_agreement": METHOD_RTOL, "kkt": KKT_TOL},
    )
    return doc


def cmd_bs_example(args) -> dict:
    params = bs.BsParams(T=args.T, lam=args.lam, grid_points=args.grid, n_paths=args.paths, seed=args.seed)
    ens = bs.simulate_paths(params)
    sand = bs.sandwich_check(ens, params)
    est = bs.estimate_utilities(ens, params, UtilitySpec("log"))
    probes = args.probe or list(bs.CATALOG)
    reports = [bs.maximality_probe(ens, params, p) for p in probes]
    reference = bs.maximality_probe(ens, params, "buy-hold-sell")
    checks = {
        "sandwich": sand.holds,
        "pathwise_zero_gap": est.wealth_max_abs_difference == 0.0 and est.max_abs_path_difference == 0.0,
        "mc_within_4se": abs(est.z_score) <= 4.0,
        "buy_hold_sell_no_witness": reference.witnesses == 0,
    }
    for r in reports:
        checks[f"witness:{r.alternative}"] = r.witnesses >= 1
    return {
        "command": "bs-example",
        "status": _status(checks),
        "checks": checks,
        "params": asdict(params),
        "sandwich": asdict(sand),
        "utilities": asdict(est),
        "probes": [asdict(r) for r in reports],
        "buy_hold_sell": asdict(reference),
        "beta_log_price_correlation": bs.beta_price_correlation(ens),
        "tolerances": {"mc_standard_errors": 4.0},
    }


# ---------------------------------------------------------------------------
# parser


def _add_instance(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tree", required=True, help="tree JSON file")
    p.add_argument("--endow", help="endowment JSON file (default: x=1, no endowment)")
    p.add_argument("--utility", default='{"family": "log"}', help="utility JSON text or file")


def _add_tolerances(p: argparse.ArgumentParser) -> None:
    d = sh.Tolerances()
    p.add_argument("--sandwich-tol", type=float, default=d.sandwich)
    p.add_argument("--supermartingale-tol", type=float, default=d.supermartingale)
    p.add_argument("--residual-rtol", type=float, default=d.residual_rtol)
    p.add_argument("--gap-rtol", type=float, default=d.gap_rtol)
    p.add_argument("--dominance-tol", type=float, default=d.dominance)
    p.add_argument("--trade-tol", type=float, default=d.trade)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shadowtree", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", help="write the JSON report here")
        p.add_argument("--json", action="store_true", help="print the JSON report instead of a summary")

    p = sub.add_parser("solve", help="optimal trading under transaction costs")
    _add_instance(p)
    common(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("solve-frictionless", help="constrained frictionless problem at given prices")
    _add_instance(p)
    p.add_argument("--prices", required=True, help='prices JSON: {"s_z": {node: price}}')
    common(p)
    p.set_defaults(func=cmd_solve_frictionless)

    p = sub.add_parser("shadow", help="construct the deflator pair at the optimum")
    _add_instance(p)
    p.add_argument("--eps", type=float, default=None, help="difference step (default 1e-5 (1 + |bond|))")
    p.add_argument("--method", choices=("fd", "kkt"), default="fd")
    _add_tolerances(p)
    common(p)
    p.set_defaults(func=cmd_shadow)

    p = sub.add_parser("verify", help="check a deflator pair against a plan")
    _add_instance(p)
    p.add_argument("--cps", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--seed", type=int, default=0, help="seed for the random admissible plans")
    _add_tolerances(p)
    common(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("pipeline", help="solve, construct, verify")
    _add_instance(p)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--method", choices=("fd", "kkt"), default="fd")
    p.add_argument("--seed", type=int, default=0)
    _add_tolerances(p)
    common(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("bs-example", help="frozen Black-Scholes example with random endowment")
    p.add_argument("--T", type=float, default=2.0)
    p.add_argument("--lambda", dest="lam", type=float, default=0.1)
    p.add_argument("--grid", type=int, default=64)
    p.add_argument("--paths", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--probe", action="append", help="catalog alternative, e.g. scaled-buy:0.9 (repeatable)")
    common(p)
    p.set_defaults(func=cmd_bs_example)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        report = args.func(args)
    except VerificationFailed as exc:
        report = exc.report
    except (OSError, ValueError, SolverError, KeyError) as exc:
        report = {"command": args.command, "status": "error", "error": f"{type(exc).__name__}: {exc}"}
        report["schema"] = SCHEMA
        sys.stderr.write(summarize(report))
        return EXIT_OPERATIONAL
    report["schema"] = SCHEMA
    try:
        _emit(report, args)
    except OSError as exc:
        sys.stderr.write(f"cannot write report: {exc}\n")
        return EXIT_OPERATIONAL
    return EXIT_OK if report.get("status") == "pass" else EXIT_VERIFICATION


if __name__ == "__main__":
    sys.exit(main())
