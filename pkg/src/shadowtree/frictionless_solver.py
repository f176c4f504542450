"""Constrained frictionless problem for a candidate price process S^Z on the tree.

Decision variables are the stock holdings ``y_n >= 0`` after rebalancing at each
non-terminal node. Rebalancing at S^Z costs nothing, so the mark-to-market wealth
evolves as ``W_child = W_n + y_n (S^Z_child - S^Z_n)`` and the bond holding is
``W_n - y_n S^Z_n``, which must also stay non-negative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import _program
from ._program import ConcaveProgram
from .friction_solver import KKT_TOL, SolveReport, TradePlan
from .market import EndowmentSpec, ScenarioTree
from .utility import UtilitySpec, expected_utility

DOMINANCE_TOL = 1e-9


@dataclass(frozen=True)
class PriceAssignment:
    s_z: Mapping[str, float]

    def __post_init__(self) -> None:
        for k, v in self.s_z.items():
            if not (v > 0.0 and math.isfinite(v)):
                raise ValueError(f"price at {k!r} must be positive, got {v!r}")

    def __getitem__(self, node_id: str) -> float:
        return float(self.s_z[node_id])

    def to_document(self) -> dict:
        return {"s_z": dict(self.s_z)}

    @classmethod
    def from_document(cls, doc: Mapping) -> "PriceAssignment":
        return cls({str(k): float(v) for k, v in doc["s_z"].items()})

    def spread_violations(self, tree: ScenarioTree, rtol: float = 1e-12) -> list[tuple[str, float]]:
        """Nodes where the price leaves [(1 - lambda) S, S], with the excursion size."""
        out = []
        for n in tree.nodes:
            sz = self[n.id]
            lo, hi = (1.0 - tree.lam) * n.price, n.price
            if sz > hi * (1.0 + rtol):
                out.append((n.id, sz - hi))
            elif sz < lo * (1.0 - rtol):
                out.append((n.id, lo - sz))
        return out


def ask_prices(tree: ScenarioTree) -> PriceAssignment:
    return PriceAssignment({n.id: n.price for n in tree.nodes})


def bid_prices(tree: ScenarioTree) -> PriceAssignment:
    return PriceAssignment({n.id: (1.0 - tree.lam) * n.price for n in tree.nodes})


def build_program(tree: ScenarioTree, prices: PriceAssignment, utility: UtilitySpec, endow: EndowmentSpec):
    root = tree.root_id
    internal = list(tree.internal)
    pos = {n: i for i, n in enumerate(internal)}
    m = len(internal)
    # wealth at each node = x + Wm[node] @ y
    Wm: dict[str, np.ndarray] = {root: np.zeros(m)}
    for n in tree.subtree(root):
        for c in tree.children(n):
            row = Wm[n].copy()
            row[pos[n]] += prices[c] - prices[n]
            Wm[c] = row
    x = endow.x
    leaves = list(tree.leaves)
    A = np.array([Wm[leaf] for leaf in leaves])
    c = np.array([x + endow.e(leaf) for leaf in leaves])
    w = np.array([tree.unconditional_prob[leaf] for leaf in leaves])
    bond = np.array([Wm[n] for n in internal])
    for n in internal:
        bond[pos[n], pos[n]] -= prices[n]
    G = np.vstack([np.eye(m), bond])
    h = np.concatenate([np.zeros(m), np.full(m, x)])
    return ConcaveProgram(utility, A, c, w, G, h), internal, Wm


def solve_frictionless(
    tree: ScenarioTree,
    prices: PriceAssignment,
    utility: UtilitySpec,
    endow: EndowmentSpec,
) -> SolveReport:
    endow.check_against(tree)
    prog, internal, Wm = build_program(tree, prices, utility, endow)
    res = _program.solve(prog, kkt_tol=KKT_TOL)
    y = res.v
    x = endow.x
    pos = {n: i for i, n in enumerate(internal)}
    buy, sell, phi0, phi1 = {}, {}, {}, {}
    for n in tree.subtree(tree.root_id):
        node = tree.node(n)
        prev = 0.0 if node.parent_id is None else phi1[node.parent_id]
        wealth = x + float(Wm[n] @ y)
        hold = float(y[pos[n]]) if n in pos else 0.0
        buy[n] = max(hold - prev, 0.0)
        sell[n] = max(prev - hold, 0.0)
        phi1[n] = hold
        phi0[n] = wealth - hold * prices[n]
    leaf_wealth = prog.wealth(y)
    value = expected_utility(utility, prog.weights, leaf_wealth)
    return SolveReport(
        value=value,
        plan=TradePlan(buy, sell, phi0, phi1),
        iterations=res.iterations,
        kkt_residual=res.kkt_residual,
        converged=res.converged,
        root=tree.root_id,
        start=(x, 0.0),
        leaf_ids=tuple(tree.leaves),
        leaf_weights=prog.weights,
        leaf_wealth=leaf_wealth,
        result=res,
    )


@dataclass
class DominanceReport:
    frictionless_value: float
    frictional_value: float
    gap: float
    dominates: bool


def dominance_check(
    tree: ScenarioTree,
    utility: UtilitySpec,
    endow: EndowmentSpec,
    prices: PriceAssignment,
    frictional_value: float,
    tol: float = DOMINANCE_TOL,
) -> DominanceReport:
    """Frictionless trading at prices inside the spread can only do better."""
    bad = prices.spread_violations(tree)
    if bad:
        raise ValueError(f"prices leave the bid-ask spread at {len(bad)} node(s), e.g. {bad[0][0]!r}")
    rep = solve_frictionless(tree, prices, utility, endow)
    gap = rep.value - frictional_value
    return DominanceReport(rep.value, frictional_value, gap, gap >= -tol)
