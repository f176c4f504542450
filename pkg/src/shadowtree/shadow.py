"""Shadow prices from marginal values of the optimal frictional plan.

At each non-terminal node the candidate deflator pair is the right derivative
of the conditional value function in the bond and in the stock direction,
evaluated at the optimal post-trade holdings:

    Z0_n = d+/da U_n(phi0_n, phi1_n),    Z1_n = d+/db U_n(phi0_n, phi1_n)

and at a leaf ``Z0 = U'(g + e)``, ``Z1 = Z0 (1 - lambda) S``. On a finite tree
there is nothing to regularize in time, so this pair is used as is. The ratio
``Z1 / Z0`` is the shadow price candidate; the rest of this module checks it.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from ._program import SolverError
from .friction_solver import (
    SolveReport,
    TradePlan,
    build_program,
    plan_value,
    solve_subtree,
)
from .frictionless_solver import DOMINANCE_TOL, PriceAssignment, solve_frictionless
from .market import EndowmentSpec, ScenarioTree
from .utility import UtilitySpec, conjugate, marginal, utility_difference

SANDWICH_TOL = 1e-8
SUPERMART_TOL = 1e-9
RESIDUAL_RTOL = 1e-5
GAP_RTOL = 1e-5
TRADE_TOL = 1e-6
ILL_CONDITIONED_RTOL = 1e-3
DEFAULT_LEVELS = 3


@dataclass(frozen=True)
class Tolerances:
    sandwich: float = SANDWICH_TOL
    supermartingale: float = SUPERMART_TOL
    residual_rtol: float = RESIDUAL_RTOL
    gap_rtol: float = GAP_RTOL
    dominance: float = DOMINANCE_TOL
    trade: float = TRADE_TOL

    def __post_init__(self) -> None:
        for name, val in asdict(self).items():
            if not (val > 0.0 and math.isfinite(val)):
                raise ValueError(f"tolerance {name} must be positive, got {val!r}")


class CPSError(ValueError):
    """Construction produced something that is not a valid deflator pair."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class CPSPair:
    z0: dict[str, float]
    z1: dict[str, float]
    epsilon_used: float
    method: str

    def implied_price(self, node_id: str) -> float:
        return self.z1[node_id] / self.z0[node_id]

    def prices(self) -> PriceAssignment:
        return PriceAssignment({k: self.z1[k] / self.z0[k] for k in self.z0})

    def to_document(self) -> dict:
        return {"schema": "1", "z0": self.z0, "z1": self.z1,
                "epsilon_used": self.epsilon_used, "method": self.method}

    @classmethod
    def from_document(cls, doc: Mapping) -> "CPSPair":
        return cls(
            {str(k): float(v) for k, v in doc["z0"].items()},
            {str(k): float(v) for k, v in doc["z1"].items()},
            float(doc.get("epsilon_used", 0.0)),
            str(doc.get("method", "external")),
        )


def worker_count() -> int:
    raw = os.environ.get("SHADOWTREE_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# invariants


@dataclass
class CPSCheck:
    min_value: float
    sandwich_violation: float  # worst relative excursion of Z1/Z0 outside [(1-lam)S, S]
    supermartingale_violation: float  # worst E[Z_child | n] - Z_n over nodes and both components
    worst_sandwich_node: str | None
    worst_supermartingale_node: str | None
    passed: bool


def check_cps(tree: ScenarioTree, cps: CPSPair, sandwich_tol: float = SANDWICH_TOL,
              super_tol: float = SUPERMART_TOL) -> CPSCheck:
    """Independent walk over the tree re-asserting positivity, sandwich and supermartingale."""
    lam = tree.lam
    min_val = math.inf
    worst_s, node_s = 0.0, None
    worst_m, node_m = -math.inf, None
    for n in tree.nodes:
        z0, z1 = cps.z0[n.id], cps.z1[n.id]
        min_val = min(min_val, z0, z1)
        ratio = z1 / z0 / n.price
        exc = max(ratio - 1.0, (1.0 - lam) - ratio, 0.0)
        if node_s is None or exc > worst_s:
            worst_s, node_s = exc, n.id
        kids = tree.children(n.id)
        if kids:
            for z in (cps.z0, cps.z1):
                drift = math.fsum(tree.node(k).prob * z[k] for k in kids) - z[n.id]
                if drift > worst_m:
                    worst_m, node_m = drift, n.id
    worst_m = max(worst_m, 0.0) if node_m is not None else 0.0
    passed = min_val > 0.0 and worst_s <= sandwich_tol and worst_m <= super_tol
    return CPSCheck(min_val, worst_s, worst_m, node_s, node_m, passed)


# ---------------------------------------------------------------------------
# construction


def _leaf_values(tree: ScenarioTree, utility: UtilitySpec, endow: EndowmentSpec, plan: TradePlan):
    z0, z1 = {}, {}
    for leaf in tree.leaves:
        y = marginal(utility, plan.phi0[leaf] + endow.e(leaf))
        z0[leaf] = y
        z1[leaf] = y * (1.0 - tree.lam) * tree.price(leaf)
    return z0, z1


def _quotients(tree, utility, endow, node, a, b, base, A, direction, eps, levels):
    """Forward difference quotients of the conditional value at ``node`` for eps / 2^k."""
    if direction == "bond":
        dc = np.ones(len(base.leaf_ids))
    else:
        dc = np.array([(1.0 - tree.lam) * tree.price(leaf) for leaf in base.leaf_ids])
    quots = []
    for k in range(levels):
        h = eps / 2.0**k
        pa, pb = (a + h, b) if direction == "bond" else (a, b + h)
        pert = solve_subtree(tree, utility, endow, node, pa, pb, warm=base)
        if not pert.converged:
            raise SolverError(f"perturbed re-solve at {node!r} ({direction}) did not converge")
        # wealth change from the trade change plus the shifted start, without cancellation
        dv = pert.result.v - base.result.v
        dw = (A @ dv if dv.size else 0.0) + dc * h
        du = np.atleast_1d(utility_difference(utility, base.leaf_wealth, dw))
        quots.append(math.fsum(base.leaf_weights * du) / h)
    return quots


def _smooth_expansion(quots: list[float]) -> bool:
    """Successive quotient differences should shrink by about half, or vanish."""
    scale = max(abs(q) for q in quots)
    diffs = [quots[i + 1] - quots[i] for i in range(len(quots) - 1)]
    for d0, d1 in zip(diffs, diffs[1:]):
        if abs(d0) <= 1e-12 * scale and abs(d1) <= 1e-12 * scale:
            continue
        if d1 == 0.0 or not 1.5 <= d0 / d1 <= 2.5:
            return False
    return True


def _richardson(quots: list[float]) -> float:
    table = list(quots)
    order = 1
    while len(table) > 1:
        f = 2.0**order
        table = [(f * table[i + 1] - table[i]) / (f - 1.0) for i in range(len(table) - 1)]
        order += 1
    return table[0]


def _node_marginals(tree, utility, endow, node, a, b, eps, levels, max_shrink=4):
    base = solve_subtree(tree, utility, endow, node, a, b)
    if not base.converged:
        raise SolverError(f"base re-solve at {node!r} did not converge")
    A = build_program(tree, utility, endow, node, a, b)[0].A
    res = {}
    used = eps
    for direction in ("bond", "stock"):
        h = eps
        for attempt in range(max_shrink + 1):
            quots = _quotients(tree, utility, endow, node, a, b, base, A, direction, h, levels)
            # a change of optimal regime inside the step breaks the expansion; shrink and retry
            if _smooth_expansion(quots) or attempt == max_shrink:
                break
            h /= 10.0
        ext = _richardson(quots)
        raw = quots[0]
        if not (math.isfinite(ext) and ext > 0.0):
            raise CPSError(f"non-positive marginal at {node!r} ({direction})", {"node": node, "quotients": quots})
        if abs(ext - raw) > ILL_CONDITIONED_RTOL * abs(ext):
            raise CPSError(
                f"ill-conditioned difference quotient at {node!r} ({direction}): "
                f"raw {raw:.10g} vs extrapolated {ext:.10g}",
                {"node": node, "direction": direction, "quotients": quots, "eps": h},
            )
        res[direction] = ext
        used = min(used, h)
    return node, res["bond"], res["stock"], used


def marginal_cps(
    tree: ScenarioTree,
    utility: UtilitySpec,
    endow: EndowmentSpec,
    report: SolveReport,
    eps: float | None = None,
    *,
    levels: int = DEFAULT_LEVELS,
    threads: int | None = None,
    verify: bool = True,
) -> CPSPair:
    """Deflator pair from one-sided difference quotients of conditional values.

    ``eps`` defaults to ``1e-5 * (1 + |phi0_n|)`` per node. Quotients at eps, eps/2,
    ... (``levels`` of them) are combined by repeated Richardson extrapolation.
    """
    if not report.converged:
        raise ValueError("marginal_cps needs a converged primal solution")
    if eps is not None and not (1e-7 <= eps <= 1e-3):
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    if levels < 2:
        raise ValueError("need at least two levels for extrapolation")
    plan = report.plan
    z0, z1 = _leaf_values(tree, utility, endow, plan)

    def task(n):
        a, b = max(plan.phi0[n], 0.0), max(plan.phi1[n], 0.0)
        h = eps if eps is not None else 1e-5 * (1.0 + abs(a))
        return _node_marginals(tree, utility, endow, n, a, b, h, levels)

    nodes = list(tree.internal)
    workers = min(threads or worker_count(), len(nodes)) or 1
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(task, nodes))
    else:
        results = [task(n) for n in nodes]
    used = 0.0
    for n, d0, d1, h in results:
        z0[n] = d0
        z1[n] = d1
        used = max(used, h)
    ordered0 = {n.id: z0[n.id] for n in tree.nodes}
    ordered1 = {n.id: z1[n.id] for n in tree.nodes}
    cps = CPSPair(ordered0, ordered1, used, "finite_difference")
    if verify:
        chk = check_cps(tree, cps)
        if not chk.passed:
            raise CPSError("constructed pair violates its invariants", asdict(chk))
    return cps


def kkt_cps(tree: ScenarioTree, utility: UtilitySpec, endow: EndowmentSpec, report: SolveReport,
            *, verify: bool = True) -> CPSPair:
    """Deflator pair from the Lagrange multipliers of the holding constraints.

    Backward recursion ``Z_n = E[Z_child | n] + mu_n / P(n)`` where ``mu_n`` is the
    multiplier of ``phi0_n >= 0`` (resp. ``phi1_n >= 0``).
    """
    if report.result is None or report.layout is None or report.root != tree.root_id:
        raise ValueError("kkt_cps needs the root solve report")
    lay = report.layout
    nu = report.result.multipliers
    mult = {name: float(nu[i]) for i, name in enumerate(lay.row_names)}
    z0, z1 = _leaf_values(tree, utility, endow, report.plan)
    P = tree.unconditional_prob
    for n in reversed(tree.subtree(tree.root_id)):
        kids = tree.children(n)
        if not kids:
            continue
        z0[n] = math.fsum(tree.node(k).prob * z0[k] for k in kids) + mult.get(("bond", n), 0.0) / P[n]
        z1[n] = math.fsum(tree.node(k).prob * z1[k] for k in kids) + mult.get(("stock", n), 0.0) / P[n]
    cps = CPSPair({n.id: z0[n.id] for n in tree.nodes}, {n.id: z1[n.id] for n in tree.nodes}, 0.0, "kkt_multiplier")
    if verify:
        chk = check_cps(tree, cps)
        if not chk.passed:
            raise CPSError("multiplier pair violates its invariants", asdict(chk))
    return cps


def construct_cps(tree, utility, endow, report, method: str = "fd", eps: float | None = None, **kw) -> CPSPair:
    if method in ("fd", "finite_difference"):
        return marginal_cps(tree, utility, endow, report, eps, **kw)
    if method in ("kkt", "kkt_multiplier"):
        return kkt_cps(tree, utility, endow, report, verify=kw.get("verify", True))
    raise ValueError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# verification


@dataclass
class OptimalityResiduals:
    r1: float
    r2: float
    threshold: float
    passed: bool


def verify_optimality_conditions(cps: CPSPair, report: SolveReport, utility: UtilitySpec,
                                 endow: EndowmentSpec, tree: ScenarioTree,
                                 rtol: float = RESIDUAL_RTOL) -> OptimalityResiduals:
    """Terminal marginal-utility match and E[Z0_T g] = Z0_0 x."""
    plan = report.plan
    r1 = 0.0
    terms = []
    for leaf in tree.leaves:
        g = plan.phi0[leaf]
        r1 = max(r1, abs(cps.z0[leaf] - marginal(utility, g + endow.e(leaf))))
        terms.append(tree.unconditional_prob[leaf] * cps.z0[leaf] * g)
    y0x = cps.z0[tree.root_id] * endow.x
    r2 = abs(math.fsum(terms) - y0x)
    thr = rtol * (1.0 + abs(y0x))
    return OptimalityResiduals(r1, r2, thr, r1 <= thr and r2 <= thr)


def duality_upper_bound(cps: CPSPair, utility: UtilitySpec, endow: EndowmentSpec, tree: ScenarioTree) -> float:
    """E[V(Z0_T)] + E[Z0_T e_T] + Z0_0 x."""
    terms = []
    for leaf in tree.leaves:
        p = tree.unconditional_prob[leaf]
        y = cps.z0[leaf]
        terms.append(p * conjugate(utility, y))
        terms.append(p * y * endow.e(leaf))
    terms.append(cps.z0[tree.root_id] * endow.x)
    return math.fsum(terms)


def shadow_gap_report(tree, utility, endow, cps: CPSPair, frictional_value: float) -> tuple[float, SolveReport]:
    rep = solve_frictionless(tree, cps.prices(), utility, endow)
    if not rep.converged:
        raise SolverError("frictionless solve at the candidate shadow price did not converge")
    return rep.value - frictional_value, rep


def shadow_gap(tree: ScenarioTree, utility: UtilitySpec, endow: EndowmentSpec, cps: CPSPair,
               frictional_value: float) -> float:
    """u^Z - u for S^Z = Z1 / Z0."""
    return shadow_gap_report(tree, utility, endow, cps, frictional_value)[0]


@dataclass
class TradeLocationViolation:
    node: str
    side: str
    traded: float
    implied_price: float
    required: float


def trade_location_report(plan: TradePlan, cps: CPSPair, tree: ScenarioTree,
                          tol: float = TRADE_TOL) -> list[TradeLocationViolation]:
    """Buying only where S^Z = S and selling only where S^Z = (1 - lambda) S."""
    out = []
    for n in tree.nodes:
        sz = cps.implied_price(n.id)
        if plan.buy.get(n.id, 0.0) > tol and sz < n.price - tol * n.price:
            out.append(TradeLocationViolation(n.id, "buy", plan.buy[n.id], sz, n.price))
        bid = (1.0 - tree.lam) * n.price
        if plan.sell.get(n.id, 0.0) > tol and sz > bid + tol * n.price:
            out.append(TradeLocationViolation(n.id, "sell", plan.sell[n.id], sz, bid))
    return out


def method_disagreement(tree: ScenarioTree, plan: TradePlan, first: CPSPair, second: CPSPair) -> dict[str, float]:
    """Relative gap between implied prices of two pairs, at every node where ``plan`` trades."""
    out = {}
    for n in tree.nodes:
        if plan.trades(n.id):
            a, b = first.implied_price(n.id), second.implied_price(n.id)
            out[n.id] = abs(a - b) / abs(b)
    return out


def corrupted_cps(tree: ScenarioTree, cps: CPSPair) -> CPSPair:
    """Negative control: keep Z0, put the implied price at the ask everywhere."""
    z1 = {n.id: cps.z0[n.id] * n.price for n in tree.nodes}
    return CPSPair(dict(cps.z0), z1, cps.epsilon_used, "corrupted_ask")


def deflated_wealth(tree: ScenarioTree, cps: CPSPair, phi0: Mapping[str, float],
                    phi1: Mapping[str, float]) -> tuple[float, float]:
    """(worst E[D_child | n] - D_n, min D) for D = Z0 phi0 + Z1 phi1."""
    D = {n.id: cps.z0[n.id] * phi0[n.id] + cps.z1[n.id] * phi1[n.id] for n in tree.nodes}
    worst = -math.inf
    for n in tree.internal:
        drift = math.fsum(tree.node(k).prob * D[k] for k in tree.children(n)) - D[n]
        worst = max(worst, drift)
    return worst, min(D.values())


def random_admissible_plan(tree: ScenarioTree, x: float, rng: np.random.Generator) -> TradePlan:
    """Random plan from (x, 0): spend a random bond fraction or sell a random stock fraction."""
    lam = tree.lam
    buy, sell, phi0, phi1 = {}, {}, {}, {}
    for n in tree.subtree(tree.root_id):
        node = tree.node(n)
        p0, p1 = (x, 0.0) if node.parent_id is None else (phi0[node.parent_id], phi1[node.parent_id])
        S = node.price
        if tree.is_leaf(n):
            b, s = 0.0, p1
        else:
            th = rng.uniform(-1.0, 1.0)
            b = th * p0 / S if th > 0 else 0.0
            s = -th * p1 if th < 0 else 0.0
        buy[n], sell[n] = b, s
        phi0[n] = max(p0 - S * b + (1.0 - lam) * S * s, 0.0)
        phi1[n] = max(p1 + b - s, 0.0)
    return TradePlan(buy, sell, phi0, phi1)


def random_frictionless_holdings(tree: ScenarioTree, prices: PriceAssignment, x: float,
                                 rng: np.random.Generator) -> tuple[dict, dict]:
    phi0, phi1 = {}, {}
    for n in tree.subtree(tree.root_id):
        node = tree.node(n)
        if node.parent_id is None:
            wealth = x
        else:
            p = node.parent_id
            wealth = phi0[p] + phi1[p] * prices[n]
        hold = 0.0 if tree.is_leaf(n) else rng.uniform(0.0, 1.0) * wealth / prices[n]
        phi1[n] = hold
        phi0[n] = max(wealth - hold * prices[n], 0.0)
    return phi0, phi1


def random_cps(tree: ScenarioTree, rng: np.random.Generator, scale: float = 1.0) -> CPSPair:
    """A random pair of positive supermartingales with ratio inside the spread."""
    lam = tree.lam
    z0, z1 = {}, {}
    for n in reversed(tree.subtree(tree.root_id)):
        node = tree.node(n)
        S = node.price
        kids = tree.children(n)
        if not kids:
            z0[n] = scale * rng.uniform(0.2, 3.0)
            z1[n] = z0[n] * S * rng.uniform(1.0 - lam, 1.0)
            continue
        m0 = math.fsum(tree.node(k).prob * z0[k] for k in kids)
        m1 = math.fsum(tree.node(k).prob * z1[k] for k in kids)
        z0[n] = max(m0, m1 / S) * (1.0 + rng.uniform(0.0, 0.2))
        lo = max((1.0 - lam) * S * z0[n], m1)
        z1[n] = rng.uniform(lo, S * z0[n])
    return CPSPair({n.id: z0[n.id] for n in tree.nodes}, {n.id: z1[n.id] for n in tree.nodes}, 0.0, "random")


# ---------------------------------------------------------------------------
# full suite


@dataclass
class VerificationReport:
    value: float
    frictionless_value: float
    gap: float
    dual_bound: float
    cps_check: CPSCheck
    residuals: OptimalityResiduals
    trade_location: list[TradeLocationViolation]
    deflated_worst_drift: float
    deflated_min: float
    random_plans_checked: int
    z0_hat_minus_tilde: float
    checks: dict[str, bool] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_document(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


def verification_suite(
    tree: ScenarioTree,
    utility: UtilitySpec,
    endow: EndowmentSpec,
    report: SolveReport,
    cps: CPSPair,
    *,
    n_random_plans: int = 50,
    seed: int = 0,
    tol: Tolerances = Tolerances(),
) -> VerificationReport:
    """Every check a shadow CPS must pass, evaluated against one plan."""
    u = report.value
    scale = 1.0 + abs(u)
    chk = check_cps(tree, cps, tol.sandwich, tol.supermartingale)
    resid = verify_optimality_conditions(cps, report, utility, endow, tree, tol.residual_rtol)
    tl = trade_location_report(report.plan, cps, tree, tol.trade)
    bound = duality_upper_bound(cps, utility, endow, tree)
    try:
        gap, _ = shadow_gap_report(tree, utility, endow, cps, u)
    except SolverError:
        gap = math.nan

    rng = np.random.default_rng(seed)
    worst, dmin = deflated_wealth(tree, cps, report.plan.phi0, report.plan.phi1)
    for _ in range(n_random_plans):
        p = random_admissible_plan(tree, endow.x, rng)
        w, m = deflated_wealth(tree, cps, p.phi0, p.phi1)
        worst, dmin = max(worst, w), min(dmin, m)

    checks = {
        "cps_positive": chk.min_value > 0.0,
        "sandwich": chk.sandwich_violation <= tol.sandwich,
        "supermartingale": chk.supermartingale_violation <= tol.supermartingale,
        "terminal_marginal_utility": resid.r1 <= resid.threshold,
        "complementarity": resid.r2 <= resid.threshold,
        "trade_location": not tl,
        "duality_chain": abs(bound - u) <= tol.gap_rtol * scale,
        "shadow_gap": math.isfinite(gap) and -tol.dominance <= gap <= tol.gap_rtol * scale,
        "deflated_wealth_supermartingale": worst <= tol.supermartingale and dmin > 0.0,
    }
    return VerificationReport(
        value=u,
        frictionless_value=u + gap,
        gap=gap,
        dual_bound=bound,
        cps_check=chk,
        residuals=resid,
        trade_location=tl,
        deflated_worst_drift=worst,
        deflated_min=dmin,
        random_plans_checked=n_random_plans,
        z0_hat_minus_tilde=0.0,
        checks=checks,
    )


def plan_report(tree, utility, endow, plan: TradePlan) -> SolveReport:
    """Wrap an externally supplied plan so the suite can verify it."""
    return SolveReport(plan_value(tree, utility, endow, plan), plan, 0, 0.0, True, root=tree.root_id,
                       start=(endow.x, 0.0))
