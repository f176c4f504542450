"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""

import math
import time
from dataclasses import dataclass

import numpy as np
import pytest

from cases import Case, oracle_cases, shadow_cases
from shadowtree import bs_example as bs
from shadowtree import shadow as sh
from shadowtree.friction_solver import SolveReport, brute_force_primal, dp_martingale_residuals, solve_primal
from shadowtree.market import EndowmentSpec
from shadowtree.utility import LOG


@dataclass
class Solved:
    case: Case
    report: SolveReport
    fd: sh.CPSPair
    kkt: sh.CPSPair


def _solve(case: Case) -> Solved:
    rep = solve_primal(case.tree, case.utility, case.endow)
    assert rep.converged, case.name
    fd = sh.construct_cps(case.tree, case.utility, case.endow, rep, "fd", verify=False)
    kkt = sh.construct_cps(case.tree, case.utility, case.endow, rep, "kkt", verify=False)
    return Solved(case, rep, fd, kkt)


@pytest.fixture(scope="module")
def solved() -> list[Solved]:
    return [_solve(c) for c in oracle_cases() + shadow_cases()]


def _scale(u: float) -> float:
    return 1.0 + abs(u)


def test_criterion_1_oracle_equivalence(record_criterion):
    worst, slowest, bad = 0.0, 0.0, []
    for case in oracle_cases():
        t0 = time.perf_counter()
        rep = solve_primal(case.tree, case.utility, case.endow)
        bf = brute_force_primal(case.tree, case.utility, case.endow)
        elapsed = time.perf_counter() - t0
        err = abs(rep.value - bf.value) / _scale(rep.value)
        worst, slowest = max(worst, err), max(slowest, elapsed)
        if err > 1e-4 or elapsed > 10.0 or not rep.converged:
            bad.append(case.name)
    ok = not bad
    record_criterion(1, ok, f"20 fixtures, worst rel err {worst:.2e} (tol 1e-4), slowest {slowest:.2f}s (limit 10s)")
    assert ok, bad


def test_criterion_2_shadow_gap_closure(record_criterion):
    worst_gap, worst_neg, slowest, bad = 0.0, 0.0, 0.0, []
    for case in shadow_cases():
        t0 = time.perf_counter()
        rep = solve_primal(case.tree, case.utility, case.endow)
        cps = sh.construct_cps(case.tree, case.utility, case.endow, rep, "fd")
        gap = sh.shadow_gap(case.tree, case.utility, case.endow, cps, rep.value)
        elapsed = time.perf_counter() - t0
        rel = abs(gap) / _scale(rep.value)
        worst_gap, worst_neg, slowest = max(worst_gap, rel), min(worst_neg, gap), max(slowest, elapsed)
        if rel > 1e-5 or gap < -1e-9 or elapsed > 60.0:
            bad.append((case.name, gap))
    ok = not bad
    record_criterion(2, ok, f"20 fixtures, worst |gap|/(1+|u|) {worst_gap:.2e} (tol 1e-5), most negative gap "
                            f"{worst_neg:.2e} (tol -1e-9), slowest {slowest:.2f}s (limit 60s)")
    assert ok, bad


def test_criterion_3_cps_validity(solved, record_criterion):
    worst_s, worst_m, worst_d, bad = 0.0, 0.0, -math.inf, []
    for i, s in enumerate(solved):
        tree = s.case.tree
        for cps in (s.fd, s.kkt):
            chk = sh.check_cps(tree, cps, 1e-8, 1e-9)
            worst_s = max(worst_s, chk.sandwich_violation)
            worst_m = max(worst_m, chk.supermartingale_violation)
            if not chk.passed:
                bad.append((s.case.name, cps.method))
        rng = np.random.default_rng([3, i])
        for _ in range(50):
            plan = sh.random_admissible_plan(tree, s.case.endow.x, rng)
            drift, low = sh.deflated_wealth(tree, s.fd, plan.phi0, plan.phi1)
            worst_d = max(worst_d, drift)
            if drift > 1e-9 or low <= 0.0:
                bad.append((s.case.name, "deflated"))
    ok = not bad
    record_criterion(3, ok, f"{len(solved)} fixtures x 2 methods, sandwich {worst_s:.1e} (tol 1e-8), "
                            f"supermartingale {worst_m:.1e} (tol 1e-9), deflated drift {worst_d:.1e} "
                            f"over 50 plans each (tol 1e-9)")
    assert ok, bad


def test_criterion_4_optimality_residuals(solved, record_criterion):
    worst, bad = 0.0, []
    for s in solved:
        res = sh.verify_optimality_conditions(s.fd, s.report, s.case.utility, s.case.endow, s.case.tree, 1e-5)
        worst = max(worst, max(res.r1, res.r2) / (res.threshold / 1e-5))
        if not res.passed:
            bad.append((s.case.name, res))
    ok = not bad
    record_criterion(4, ok, f"{len(solved)} fixtures, worst max(r1, r2)/(1+|z0 x|) {worst:.2e} (tol 1e-5)")
    assert ok, bad


def test_criterion_5_trade_location(solved, record_criterion):
    violations, trading, caught, bad = 0, 0, 0, []
    for s in solved:
        tree, plan = s.case.tree, s.report.plan
        found = sh.trade_location_report(plan, s.fd, tree, 1e-6)
        violations += len(found)
        if found:
            bad.append((s.case.name, found))
        if any(plan.trades(n) for n in tree.internal):
            trading += 1
            neg = sh.trade_location_report(plan, sh.corrupted_cps(tree, s.fd), tree, 1e-6)
            if neg:
                caught += 1
            else:
                bad.append((s.case.name, "negative control missed"))
    ok = not bad and trading > 0
    record_criterion(5, ok, f"{violations} violations on {len(solved)} fixtures (tol 1e-6); corrupted pair "
                            f"flagged on {caught}/{trading} trading fixtures")
    assert ok, bad


def test_criterion_6_duality_chain(solved, record_criterion):
    worst, worst_slack, bad = 0.0, math.inf, []
    for i, s in enumerate(solved):
        tree, util, endow, u = s.case.tree, s.case.utility, s.case.endow, s.report.value
        bound = sh.duality_upper_bound(s.fd, util, endow, tree)
        rel = abs(bound - u) / _scale(u)
        worst = max(worst, rel)
        if rel > 1e-5:
            bad.append((s.case.name, rel))
        rng = np.random.default_rng([6, i])
        for _ in range(10):
            other = sh.random_cps(tree, rng, float(rng.uniform(0.2, 5.0)))
            slack = sh.duality_upper_bound(other, util, endow, tree) - u
            worst_slack = min(worst_slack, slack)
            if slack < -1e-8:
                bad.append((s.case.name, "random pair below u", slack))
    ok = not bad
    record_criterion(6, ok, f"{len(solved)} fixtures, worst |bound - u|/(1+|u|) {worst:.2e} (tol 1e-5); "
                            f"smallest random-pair slack {worst_slack:.2e} (tol -1e-8)")
    assert ok, bad


def test_criterion_7_dp_martingale(solved, record_criterion):
    worst, bad = 0.0, []
    for s in solved:
        res = dp_martingale_residuals(s.case.tree, s.case.utility, s.case.endow, s.report.plan)
        w = max(res.values(), default=0.0)
        worst = max(worst, w)
        if w > 1e-6:
            bad.append((s.case.name, w))
    ok = not bad
    record_criterion(7, ok, f"{len(solved)} fixtures, worst nodewise residual {worst:.2e} (tol 1e-6)")
    assert ok, bad


def test_criterion_8_black_scholes_example(record_criterion):
    t0 = time.perf_counter()
    params = bs.BsParams(T=2.0, lam=0.1, grid_points=64, n_paths=100_000, seed=42)
    ens = bs.simulate_paths(params)
    sand = bs.sandwich_check(ens, params)
    est = bs.estimate_utilities(ens, params, LOG)
    probes = {alt: bs.maximality_probe(ens, params, alt).witnesses for alt in bs.CATALOG}
    reference = bs.maximality_probe(ens, params, "buy-hold-sell").witnesses
    elapsed = time.perf_counter() - t0
    parts = {
        "a": sand.holds,
        "b": est.max_abs_path_difference == 0.0 and est.wealth_max_abs_difference == 0.0,
        "c": abs(est.z_score) <= 4.0,
        "d": all(w >= 1 for w in probes.values()) and reference == 0,
        "time": elapsed <= 120.0,
    }
    ok = all(parts.values())
    record_criterion(8, ok, f"sandwich violations {sand.violations}, path difference "
                            f"{est.max_abs_path_difference}, z = {est.z_score:.2f} (|z| <= 4), witnesses "
                            f"{probes} vs buy-hold-sell {reference}, {elapsed:.1f}s (limit 120s)")
    assert ok, parts


def test_criterion_9_structural_invariants(solved, record_criterion):
    bad = []
    worst_conc, worst_mono, worst_scale, worst_method = -math.inf, -math.inf, 0.0, 0.0
    for s in solved:
        tree, util, endow = s.case.tree, s.case.utility, s.case.endow
        x = endow.x

        def u_at(xx, lam=tree.lam):
            return solve_primal(tree.with_lambda(lam), util, EndowmentSpec(xx, dict(endow.e_leaf))).value

        lo, hi = u_at(0.5 * x), u_at(1.5 * x)
        conc = 0.5 * (lo + hi) - s.report.value
        worst_conc = max(worst_conc, conc)
        if conc > 1e-8:
            bad.append((s.case.name, "concavity", conc))

        lams = [0.5 * tree.lam, tree.lam, min(2.0 * tree.lam, 0.9)]
        vals = [u_at(x, lam) for lam in lams]
        mono = max(vals[1] - vals[0], vals[2] - vals[1])
        worst_mono = max(worst_mono, mono)
        if mono > 1e-10:
            bad.append((s.case.name, "lambda monotonicity", mono))

        base = solve_primal(tree, LOG, EndowmentSpec(1.0, {}))
        scaled = solve_primal(tree, LOG, EndowmentSpec(3.0, {}))
        for n in tree.internal:
            for side in ("buy", "sell"):
                ref = getattr(base.plan, side)[n]
                dev = abs(getattr(scaled.plan, side)[n] - 3.0 * ref) / max(3.0 * abs(ref), 1e-3)
                worst_scale = max(worst_scale, dev)
                if dev > 1e-6:
                    bad.append((s.case.name, "log scaling", n, side, dev))

        dis = sh.method_disagreement(tree, s.report.plan, s.fd, s.kkt)
        w = max(dis.values(), default=0.0)
        worst_method = max(worst_method, w)
        if w > 1e-4:
            bad.append((s.case.name, "fd vs kkt", w))
    ok = not bad
    record_criterion(9, ok, f"{len(solved)} fixtures: concavity excess {worst_conc:.1e} (tol 1e-8), "
                            f"lambda excess {worst_mono:.1e} (tol 1e-10), log scaling {worst_scale:.1e} (tol 1e-6), "
                            f"fd vs kkt {worst_method:.1e} (tol 1e-4)")
    assert ok, bad
