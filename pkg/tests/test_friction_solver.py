import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cases import POWER_HALF, martingale_tree, textbook_tree, unit_cash
from shadowtree.friction_solver import (
    TradePlan,
    brute_force_primal,
    check_admissible,
    conditional_value,
    dp_martingale_residuals,
    plan_value,
    solve_primal,
    solve_subtree,
)
from shadowtree.market import EndowmentSpec, build_binomial, build_lattice, random_tree
from shadowtree.shadow import random_admissible_plan
from shadowtree.utility import LOG, evaluate


def hold_only(tree, x):
    zero = {n.id: 0.0 for n in tree.nodes}
    return TradePlan(dict(zero), dict(zero), {n.id: x for n in tree.nodes}, dict(zero))


def test_textbook_tree_against_one_dimensional_grid():
    tree = textbook_tree(0.01)
    rep = solve_primal(tree, LOG, unit_cash())
    assert rep.converged
    # buy b shares at S0 = 1, liquidate at the bid at t = 1
    b = np.arange(0.0, 1.0 + 5e-6, 1e-5)
    grid = 0.5 * np.log(1.0 - b + 0.99 * 2.0 * b) + 0.5 * np.log(1.0 - b + 0.99 * 0.5 * b)
    j = int(np.argmax(grid))
    assert rep.value == pytest.approx(grid[j], abs=1e-4)
    assert rep.plan.buy["r"] == pytest.approx(b[j], abs=1e-4)
    assert rep.plan.sell["r"] == 0.0


@pytest.mark.parametrize("lam", [1e-6, 0.01, 0.3, 0.9])
def test_martingale_tree_does_not_trade(lam):
    rep = solve_primal(martingale_tree(lam), LOG, unit_cash())
    assert rep.converged
    assert rep.value == pytest.approx(0.0, abs=1e-12)
    assert max(rep.plan.buy.values()) <= 1e-9 and max(rep.plan.sell.values()) <= 1e-9


def test_prohibitive_cost_means_no_trade():
    rep = solve_primal(textbook_tree(0.99), LOG, unit_cash())
    assert rep.value == pytest.approx(0.0, abs=1e-12)
    assert not any(rep.plan.trades(n) for n in rep.plan.buy)


def test_optimal_plan_is_admissible_and_liquidated():
    tree = build_binomial(1.0, 1.25, 0.85, 0.6, 3, 0.02)
    endow = EndowmentSpec(1.0, {leaf: 0.1 for leaf in tree.leaves})
    rep = solve_primal(tree, LOG, endow)
    assert rep.converged
    assert check_admissible(tree, rep.plan, endow) == []
    for leaf in tree.leaves:
        assert rep.plan.phi1[leaf] == 0.0
    for n in tree.internal:
        assert min(rep.plan.buy[n], rep.plan.sell[n]) <= 1e-9
    assert rep.value == pytest.approx(plan_value(tree, LOG, endow, rep.plan), abs=1e-14)


def test_check_admissible_examples():
    tree = textbook_tree()
    assert check_admissible(tree, hold_only(tree, 1.0), unit_cash()) == []
    plan = hold_only(tree, 1.0)
    plan.buy["r"] = 2.0
    plan.phi0["r"], plan.phi1["r"] = -1.0, 2.0
    for leaf in tree.leaves:
        plan.sell[leaf] = 2.0
        plan.phi0[leaf] = -1.0 + 2.0 * 0.99 * tree.price(leaf)
    found = {(v.node, v.kind): v.magnitude for v in check_admissible(tree, plan, unit_cash())}
    assert found[("r", "short bond")] == pytest.approx(1.0)
    # the down leaf cannot repay the loan either: -1 + 0.99 * 0.5 * 2
    assert found[("r.1", "short bond")] == pytest.approx(0.01)
    assert len(found) == 2


def test_check_admissible_flags_bookkeeping_errors():
    tree = textbook_tree()
    plan = hold_only(tree, 1.0)
    plan.phi1["r"] = 0.5  # stock appears from nowhere and is never sold
    kinds = {v.kind for v in check_admissible(tree, plan, unit_cash())}
    assert {"stock not self-financing", "not liquidated at horizon"} <= kinds


def test_conditional_value_examples():
    tree = build_binomial(1.0, 1.2, 0.9, 0.6, 2, 0.05)
    endow = EndowmentSpec(1.0, {"r.0.1": 0.3})
    leaf = "r.0.1"
    a, b = 0.4, 0.7
    expected = evaluate(LOG, a + 0.95 * tree.price(leaf) * b + 0.3)
    assert conditional_value(tree, LOG, endow, leaf, a, b) == pytest.approx(expected, abs=1e-15)
    root = conditional_value(tree, LOG, endow, "r", 1.0, 0.0)
    assert root == solve_primal(tree, LOG, endow).value
    for node in ("r", "r.1"):
        lo = conditional_value(tree, LOG, endow, node, 0.5, 0.2)
        hi = conditional_value(tree, LOG, endow, node, 0.5 + 1e-3, 0.2)
        assert hi > lo
    with pytest.raises(KeyError):
        conditional_value(tree, LOG, endow, "nowhere", 1.0, 0.0)
    with pytest.raises(ValueError):
        conditional_value(tree, LOG, endow, "r", -1.0, 0.0)


def test_empty_holdings_with_ruin_give_minus_infinity():
    tree = build_binomial(1.0, 1.2, 0.9, 0.6, 2, 0.05)
    rep = solve_subtree(tree, LOG, EndowmentSpec(1.0, {"r.1.0": 0.3}), "r.1", 0.0, 0.0)
    assert rep.converged and rep.value == -math.inf


def test_solve_primal_rejects_negative_endowment():
    tree = textbook_tree()
    with pytest.raises(Exception, match="negative"):
        solve_primal(tree, LOG, EndowmentSpec(1.0, {"r.0": -0.1}))


def test_brute_force_guard_and_trivial_bound():
    with pytest.raises(ValueError, match="instance too large"):
        brute_force_primal(build_binomial(1.0, 1.2, 0.9, 0.5, 3, 0.01), LOG, unit_cash())
    tree = build_binomial(1.0, 1.2, 0.9, 0.5, 1, 0.999999)
    endow = EndowmentSpec(1.0, {"r.0": 0.2, "r.1": 0.0})
    hold = 0.5 * math.log(1.2) + 0.5 * math.log(1.0)
    bf = brute_force_primal(tree, LOG, endow)
    assert bf.value >= hold - 1e-15
    assert solve_primal(tree, LOG, endow).value == pytest.approx(hold, abs=1e-12)


@pytest.mark.parametrize("util", [LOG, POWER_HALF])
def test_brute_force_agrees_on_trinomial(util):
    tree = build_lattice(1.0, [1.3, 1.0, 0.8], [0.4, 0.3, 0.3], 2, 0.02)
    endow = EndowmentSpec(1.0, {"r.2.2": 0.4, "r.0.1": 0.1})
    rep = solve_primal(tree, util, endow)
    bf = brute_force_primal(tree, util, endow)
    assert abs(rep.value - bf.value) <= 1e-4 * (1.0 + abs(rep.value))
    assert bf.value <= rep.value + 1e-10


def test_dp_martingale_along_optimum():
    tree = build_binomial(1.0, 1.25, 0.85, 0.6, 3, 0.02)
    endow = EndowmentSpec(0.8, {leaf: 0.05 * i for i, leaf in enumerate(tree.leaves)})
    rep = solve_primal(tree, LOG, endow)
    res = dp_martingale_residuals(tree, LOG, endow, rep.plan)
    assert set(res) == set(tree.internal)
    assert max(res.values()) <= 1e-6


def test_dp_martingale_fails_for_a_bad_plan():
    tree = build_binomial(1.0, 1.25, 0.85, 0.6, 2, 0.02)
    plan = hold_only(tree, 1.0)
    res = dp_martingale_residuals(tree, LOG, unit_cash(), plan)
    # holding cash at the root forgoes the value of trading right away
    assert res["r"] > 1e-3


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), lam=st.sampled_from([0.005, 0.05, 0.2]))
def test_concave_in_initial_wealth(seed, lam):
    rng = np.random.default_rng(seed)
    tree = random_tree(rng, 2, lam, max_branch=3)
    e = {leaf: float(rng.uniform(0, 0.5)) for leaf in tree.leaves}
    x1, x2 = sorted(rng.uniform(0.2, 3.0, size=2))
    u = {x: solve_primal(tree, LOG, EndowmentSpec(float(x), e)).value for x in (x1, x2, 0.5 * (x1 + x2))}
    assert u[0.5 * (x1 + x2)] >= 0.5 * (u[x1] + u[x2]) - 1e-8


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_more_friction_never_helps(seed):
    rng = np.random.default_rng(seed)
    tree = random_tree(rng, 2, 0.01, max_branch=3)
    endow = EndowmentSpec(1.0, {leaf: float(rng.uniform(0, 0.5)) for leaf in tree.leaves})
    lams = sorted(rng.uniform(1e-4, 0.5, size=3))
    vals = [solve_primal(tree.with_lambda(float(l)), POWER_HALF, endow).value for l in lams]
    assert vals[0] >= vals[1] - 1e-10 and vals[1] >= vals[2] - 1e-10


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), c=st.floats(0.1, 10.0))
def test_log_trades_scale_with_wealth(seed, c):
    rng = np.random.default_rng(seed)
    tree = random_tree(rng, 2, float(rng.choice([0.005, 0.02])), max_branch=2, vol=0.3)
    base = solve_primal(tree, LOG, EndowmentSpec(1.0, {}))
    scaled = solve_primal(tree, LOG, EndowmentSpec(c, {}))
    for n in tree.internal:
        for side in ("buy", "sell"):
            ref = getattr(base.plan, side)[n]
            got = getattr(scaled.plan, side)[n]
            assert abs(got - c * ref) <= 1e-6 * max(c * abs(ref), 1e-3 * c)
    assert scaled.value == pytest.approx(base.value + math.log(c), abs=1e-9)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_no_admissible_plan_beats_the_optimum(seed):
    rng = np.random.default_rng(seed)
    tree = random_tree(rng, 3, 0.02, max_branch=2)
    endow = EndowmentSpec(1.0, {leaf: float(rng.uniform(0, 0.3)) for leaf in tree.leaves})
    rep = solve_primal(tree, LOG, endow)
    for _ in range(30):
        plan = random_admissible_plan(tree, 1.0, rng)
        assert check_admissible(tree, plan, endow, tol=1e-9) == []
        assert plan_value(tree, LOG, endow, plan) <= rep.value + 1e-8


def test_perturbed_optimum_does_not_improve():
    tree = build_binomial(1.0, 1.25, 0.85, 0.6, 3, 0.02)
    rep = solve_primal(tree, LOG, unit_cash())
    rng = np.random.default_rng(7)
    for _ in range(20):
        # nudge the root trade, then re-optimize everything below it
        d = rng.uniform(-0.02, 0.02)
        b = min(max(rep.plan.buy["r"] + d, 0.0), 1.0)
        a = 1.0 - b
        kids = tree.children("r")
        total = math.fsum(tree.node(k).prob * conditional_value(tree, LOG, unit_cash(), k, a, b) for k in kids)
        assert total <= rep.value + 1e-8


def test_wash_trades_are_netted():
    tree = build_binomial(1.0, 1.25, 0.85, 0.6, 3, 0.001)
    rep = solve_primal(tree, LOG, unit_cash())
    for n in tree.nodes:
        assert rep.plan.buy[n.id] == 0.0 or rep.plan.sell[n.id] == 0.0
