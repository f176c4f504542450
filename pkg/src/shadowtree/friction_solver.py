"""Expected-utility maximization under proportional costs and no short selling.

Decision variables are the shares bought (``b_n``, at the ask) and sold (``s_n``,
at the bid) at every non-terminal node. Holdings after trading at node ``n``:

    phi0_n = phi0_parent - S_n b_n + (1 - lambda) S_n s_n
    phi1_n = phi1_parent + b_n - s_n

Both must stay non-negative. At a leaf the stock position is liquidated at the
bid and no buying is allowed, so the utility argument is
``phi0_parent + (1 - lambda) S_leaf phi1_parent + e_leaf``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import _program
from ._program import ConcaveProgram, ProgramResult, SolverError
from .market import EndowmentSpec, ScenarioTree
from .utility import NEG_INF, UtilitySpec, evaluate, expected_utility

TOL_FEAS = 1e-9
KKT_TOL = 1e-8


@dataclass
class TradePlan:
    buy: dict[str, float]
    sell: dict[str, float]
    phi0: dict[str, float]
    phi1: dict[str, float]

    def to_document(self) -> dict:
        return {"buy": self.buy, "sell": self.sell, "phi0": self.phi0, "phi1": self.phi1}

    @classmethod
    def from_document(cls, doc: dict) -> "TradePlan":
        return cls(*({str(k): float(v) for k, v in doc[key].items()} for key in ("buy", "sell", "phi0", "phi1")))

    def terminal_bond(self, tree: ScenarioTree) -> dict[str, float]:
        return {leaf: self.phi0[leaf] for leaf in tree.leaves}

    def trades(self, node_id: str) -> bool:
        return self.buy.get(node_id, 0.0) > TOL_FEAS or self.sell.get(node_id, 0.0) > TOL_FEAS


@dataclass
class SolveReport:
    value: float
    plan: TradePlan
    iterations: int
    kkt_residual: float
    converged: bool
    # solver internals, used for marginal and multiplier computations
    root: str = ""
    start: tuple[float, float] = (0.0, 0.0)
    leaf_ids: tuple[str, ...] = ()
    leaf_weights: np.ndarray | None = field(default=None, repr=False)
    leaf_wealth: np.ndarray | None = field(default=None, repr=False)
    result: ProgramResult | None = field(default=None, repr=False)
    layout: "FrictionLayout | None" = field(default=None, repr=False)

    def to_document(self) -> dict:
        return {
            "value": self.value,
            "plan": self.plan.to_document(),
            "kkt_residual": self.kkt_residual,
            "iterations": self.iterations,
            "converged": self.converged,
        }


@dataclass
class FrictionLayout:
    """Index bookkeeping for the concave program on the subtree below ``root``."""

    tree: ScenarioTree
    root: str
    internal: list[str]
    leaves: list[str]
    M0: np.ndarray  # phi0 at internal nodes = a + M0 v
    M1: np.ndarray  # phi1 at internal nodes = b + M1 v
    row_names: list[tuple[str, str]]

    @property
    def m(self) -> int:
        return len(self.internal)

    def index(self, node_id: str) -> int:
        return self._pos[node_id]

    def __post_init__(self) -> None:
        self._pos = {n: i for i, n in enumerate(self.internal)}


def _layout(tree: ScenarioTree, root: str) -> FrictionLayout:
    sub = tree.subtree(root)
    internal = [n for n in sub if not tree.is_leaf(n)]
    leaves = [n for n in sub if tree.is_leaf(n)]
    m = len(internal)
    pos = {n: i for i, n in enumerate(internal)}
    lam = tree.lam
    M0 = np.zeros((m, 2 * m))
    M1 = np.zeros((m, 2 * m))
    for n in internal:
        i = pos[n]
        cur: str | None = n
        while cur is not None:
            k = pos[cur]
            S = tree.price(cur)
            M0[i, k] = -S
            M0[i, m + k] = (1.0 - lam) * S
            M1[i, k] = 1.0
            M1[i, m + k] = -1.0
            cur = None if cur == root else tree.node(cur).parent_id
    names = ([("buy", n) for n in internal] + [("sell", n) for n in internal]
             + [("bond", n) for n in internal] + [("stock", n) for n in internal])
    return FrictionLayout(tree, root, internal, leaves, M0, M1, names)


def build_program(
    tree: ScenarioTree,
    utility: UtilitySpec,
    endow: EndowmentSpec,
    root: str,
    a: float,
    b: float,
) -> tuple[ConcaveProgram, FrictionLayout]:
    lay = _layout(tree, root)
    m = lay.m
    lam = tree.lam
    L = len(lay.leaves)
    A = np.zeros((L, 2 * m))
    c = np.zeros(L)
    w = np.zeros(L)
    for j, leaf in enumerate(lay.leaves):
        bid = (1.0 - lam) * tree.price(leaf)
        if leaf == root:
            c[j] = a + bid * b + endow.e(leaf)
            w[j] = 1.0
            continue
        p = lay.index(tree.node(leaf).parent_id)
        A[j] = lay.M0[p] + bid * lay.M1[p]
        c[j] = a + bid * b + endow.e(leaf)
        w[j] = tree.conditional_prob(root, leaf)
    G = np.vstack([np.eye(2 * m), lay.M0, lay.M1])
    h = np.concatenate([np.zeros(2 * m), np.full(m, float(a)), np.full(m, float(b))])
    return ConcaveProgram(utility, A, c, w, G, h), lay


def _plan_from_vector(lay: FrictionLayout, v: np.ndarray, a: float, b: float) -> TradePlan:
    tree = lay.tree
    m = lay.m
    lam = tree.lam
    buy, sell, phi0, phi1 = {}, {}, {}, {}
    if m:
        h0 = a + lay.M0 @ v
        h1 = b + lay.M1 @ v
    for i, n in enumerate(lay.internal):
        buy[n] = float(v[i])
        sell[n] = float(v[m + i])
        phi0[n] = float(h0[i])
        phi1[n] = float(h1[i])
    for leaf in lay.leaves:
        if leaf == lay.root:
            pa, pb = a, b
        else:
            p = lay.index(tree.node(leaf).parent_id)
            pa, pb = h0[p], h1[p]
        buy[leaf] = 0.0
        sell[leaf] = float(pb)
        phi0[leaf] = float(pa + (1.0 - lam) * tree.price(leaf) * pb)
        phi1[leaf] = 0.0
    return TradePlan(buy, sell, phi0, phi1)


def _net_wash_trades(v: np.ndarray, m: int) -> np.ndarray:
    b, s = v[:m], v[m:]
    net = b - s
    return np.concatenate([np.maximum(net, 0.0), np.maximum(-net, 0.0)])


def solve_subtree(
    tree: ScenarioTree,
    utility: UtilitySpec,
    endow: EndowmentSpec,
    node: str,
    a: float,
    b: float,
    *,
    warm: SolveReport | None = None,
) -> SolveReport:
    """Optimal trading on the subtree rooted at ``node``, entering with holdings (a, b).

    Trading is allowed at ``node`` itself, so the returned value is the conditional
    value function at ``node`` evaluated at pre-trade holdings (a, b).
    """
    tree.node(node)
    if a < 0.0 or b < 0.0:
        raise ValueError("starting holdings must be non-negative")
    prog, lay = build_program(tree, utility, endow, node, a, b)
    m = lay.m

    if m and a == 0.0 and b == 0.0:
        # only the zero plan is admissible
        v = np.zeros(2 * m)
        res = ProgramResult(v, prog.value(v), prog.slack(v) <= 0.0, np.zeros(4 * m), 0, 0.0, True)
    else:
        warm_v = warm_a = None
        if warm is not None and warm.result is not None and warm.layout is not None and warm.root == node:
            warm_v, warm_a = warm.result.v, warm.result.active
        res = _program.solve(prog, warm_start=warm_v, warm_active=warm_a, kkt_tol=KKT_TOL)

    v = _net_wash_trades(res.v, m) if m else res.v
    wealth = prog.wealth(v)
    value = expected_utility(utility, prog.weights, wealth)
    if value == NEG_INF:
        # degenerate instance: every admissible plan ruins some leaf
        v = np.zeros(2 * m)
        wealth = prog.wealth(v)
        res.converged = True
    res.v = v
    plan = _plan_from_vector(lay, v, a, b)
    return SolveReport(
        value=value,
        plan=plan,
        iterations=res.iterations,
        kkt_residual=res.kkt_residual,
        converged=res.converged,
        root=node,
        start=(float(a), float(b)),
        leaf_ids=tuple(lay.leaves),
        leaf_weights=prog.weights,
        leaf_wealth=wealth,
        result=res,
        layout=lay,
    )


def solve_primal(tree: ScenarioTree, utility: UtilitySpec, endow: EndowmentSpec) -> SolveReport:
    """Maximize E[U(g + e_T)] over terminal bond positions of admissible strategies from (x, 0)."""
    endow.check_against(tree)
    if not endow.x > 0.0:
        raise ValueError("infeasible start: x must be positive")
    return solve_subtree(tree, utility, endow, tree.root_id, endow.x, 0.0)


def conditional_value(
    tree: ScenarioTree,
    utility: UtilitySpec,
    endow: EndowmentSpec,
    node: str,
    a: float,
    b: float,
) -> float:
    rep = solve_subtree(tree, utility, endow, node, a, b)
    if not rep.converged:
        raise SolverError(f"conditional value at {node!r} did not converge (kkt={rep.kkt_residual:.3g})")
    return rep.value


def dp_martingale_residuals(
    tree: ScenarioTree,
    utility: UtilitySpec,
    endow: EndowmentSpec,
    plan: TradePlan,
) -> dict[str, float]:
    """|U_n(phi_n) - sum_c P(c|n) U_c(phi_c)| at every non-terminal node along ``plan``.

    Both sides are conditional values at post-trade holdings, computed by
    independent subtree re-solves.
    """
    values: dict[str, float] = {}
    for n in tree.subtree(tree.root_id):
        a, b = max(plan.phi0[n], 0.0), max(plan.phi1[n], 0.0)
        values[n] = conditional_value(tree, utility, endow, n, a, b)
    out = {}
    for n in tree.internal:
        kids = tree.children(n)
        rhs = math.fsum(tree.node(c).prob * values[c] for c in kids)
        out[n] = abs(values[n] - rhs)
    return out


# ---------------------------------------------------------------------------
# admissibility diagnostics


@dataclass
class Violation:
    node: str
    kind: str
    magnitude: float


def check_admissible(tree: ScenarioTree, plan: TradePlan, endow: EndowmentSpec, tol: float = TOL_FEAS) -> list[Violation]:
    """Re-derive holdings from the trades and list every violated constraint."""
    lam = tree.lam
    out: list[Violation] = []
    for nid in tree.subtree(tree.root_id):
        node = tree.node(nid)
        if node.parent_id is None:
            p0, p1 = endow.x, 0.0
        else:
            p0, p1 = plan.phi0[node.parent_id], plan.phi1[node.parent_id]
        b = plan.buy.get(nid, 0.0)
        s = plan.sell.get(nid, 0.0)
        if b < -tol:
            out.append(Violation(nid, "negative buy", -b))
        if s < -tol:
            out.append(Violation(nid, "negative sell", -s))
        S = node.price
        q0 = p0 - S * b + (1.0 - lam) * S * s
        q1 = p1 + b - s
        scale = 1.0 + abs(p0) + S * (abs(b) + abs(s))
        if abs(q0 - plan.phi0[nid]) > tol * scale:
            out.append(Violation(nid, "bond not self-financing", abs(q0 - plan.phi0[nid])))
        if abs(q1 - plan.phi1[nid]) > tol * (1.0 + abs(p1) + abs(b) + abs(s)):
            out.append(Violation(nid, "stock not self-financing", abs(q1 - plan.phi1[nid])))
        if q0 < -tol:
            out.append(Violation(nid, "short bond", -q0))
        if q1 < -tol:
            out.append(Violation(nid, "short stock", -q1))
        if tree.is_leaf(nid):
            if abs(q1) > tol:
                out.append(Violation(nid, "not liquidated at horizon", abs(q1)))
            if b > tol:
                out.append(Violation(nid, "terminal buying", b))
    return out


def plan_value(tree: ScenarioTree, utility: UtilitySpec, endow: EndowmentSpec, plan: TradePlan) -> float:
    leaves = tree.leaves
    probs = [tree.unconditional_prob[leaf] for leaf in leaves]
    wealth = [plan.phi0[leaf] + endow.e(leaf) for leaf in leaves]
    return expected_utility(utility, probs, wealth)


# ---------------------------------------------------------------------------
# brute-force oracle

MAX_BRUTE_VARS = 6
MAX_BRUTE_COMBOS = 10**6


@dataclass
class BruteForceResult:
    value: float
    net_trades: dict[str, float]
    spacing: float
    error_bound: float


def brute_force_primal(
    tree: ScenarioTree,
    utility: UtilitySpec,
    endow: EndowmentSpec,
    grid_steps: int | None = None,
    refinements: int = 14,
) -> BruteForceResult:
    """Exhaustive grid search over net trades, followed by grid zooming.

    Each non-terminal node gets a coordinate ``theta`` in [-1, 1]: ``theta >= 0``
    spends the fraction ``theta`` of the bond on stock at the ask, ``theta < 0``
    sells the fraction ``-theta`` of the stock at the bid. Every grid point is
    admissible, so the result is always a lower bound on the true optimum.
    """
    internal = list(tree.internal)
    k = len(internal)
    if k > MAX_BRUTE_VARS:
        raise ValueError(f"instance too large: {k} trade variables (limit {MAX_BRUTE_VARS})")
    if grid_steps is None:
        grid_steps = max(3, int(MAX_BRUTE_COMBOS ** (1.0 / max(k, 1))))
    if k and grid_steps**k > MAX_BRUTE_COMBOS:
        raise ValueError(f"instance too large: {grid_steps}^{k} grid points exceed {MAX_BRUTE_COMBOS}")

    lam = tree.lam
    leaves = list(tree.leaves)
    probs = np.array([tree.unconditional_prob[leaf] for leaf in leaves])
    e = np.array([endow.e(leaf) for leaf in leaves])
    pos = {n: i for i, n in enumerate(internal)}
    order = [n for n in tree.subtree(tree.root_id) if n in pos]

    def evaluate_grid(theta: np.ndarray) -> np.ndarray:
        # theta: (P, k) -> expected utility (P,)
        P = theta.shape[0]
        h0: dict[str, np.ndarray] = {}
        h1: dict[str, np.ndarray] = {}
        for n in order:
            node = tree.node(n)
            if node.parent_id is None:
                p0, p1 = np.full(P, endow.x), np.zeros(P)
            else:
                p0, p1 = h0[node.parent_id], h1[node.parent_id]
            th = theta[:, pos[n]]
            S = node.price
            buy = np.where(th > 0.0, th * p0 / S, 0.0)
            sell = np.where(th < 0.0, -th * p1, 0.0)
            h0[n] = np.maximum(p0 - S * buy + (1.0 - lam) * S * sell, 0.0)
            h1[n] = np.maximum(p1 + buy - sell, 0.0)
        wealth = np.empty((P, len(leaves)))
        for j, leaf in enumerate(leaves):
            par = tree.node(leaf).parent_id
            wealth[:, j] = h0[par] + (1.0 - lam) * tree.price(leaf) * h1[par] + e[j]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = evaluate(utility, np.where(wealth > 0.0, wealth, 1.0))
        u = np.where(wealth > 0.0, u, -np.inf)
        return u @ probs

    if k == 0:
        val = float(evaluate_grid(np.zeros((1, 0)))[0])
        return BruteForceResult(val, {}, 0.0, 0.0)

    lo = np.full(k, -1.0)
    hi = np.full(k, 1.0)
    steps = grid_steps
    best_theta = np.zeros(k)
    best = -math.inf
    spacing = 2.0
    slope = 0.0
    for level in range(refinements + 1):
        axes = [np.linspace(lo[i], hi[i], steps) for i in range(k)]
        grid = np.array(list(itertools.product(*axes))) if k > 1 else axes[0][:, None]
        vals = evaluate_grid(grid)
        j = int(np.argmax(vals))
        if vals[j] >= best:
            best = float(vals[j])
            best_theta = grid[j]
        spacing = float(np.max((hi - lo) / (steps - 1)))
        finite = vals[np.isfinite(vals)]
        if finite.size > 1:
            slope = float((finite.max() - np.partition(finite, -2)[-2]) / max(spacing, 1e-300))
        half = 1.5 * (hi - lo) / (steps - 1)
        lo = np.maximum(best_theta - half, -1.0)
        hi = np.minimum(best_theta + half, 1.0)
        steps = min(grid_steps, 11) if k > 1 else grid_steps
    # recover net trades at the best point
    net = {}
    h0 = {}
    h1 = {}
    for n in order:
        node = tree.node(n)
        p0, p1 = (endow.x, 0.0) if node.parent_id is None else (h0[node.parent_id], h1[node.parent_id])
        th = best_theta[pos[n]]
        S = node.price
        d = th * p0 / S if th > 0 else th * p1
        net[n] = float(d)
        h0[n] = p0 - S * max(d, 0.0) + (1.0 - lam) * S * max(-d, 0.0)
        h1[n] = p1 + d
    return BruteForceResult(best, net, spacing, abs(slope) * spacing)
