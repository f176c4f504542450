import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shadowtree._program import ConcaveProgram, kkt_residual, solve
from shadowtree.utility import LOG, UtilitySpec


def two_leaf(G, h):
    # 0.5 ln(1 + v) + 0.5 ln(2 - v), unconstrained maximizer v = 0.5
    return ConcaveProgram(LOG, np.array([[1.0], [-1.0]]), np.array([1.0, 2.0]), np.array([0.5, 0.5]),
                          np.asarray(G, float), np.asarray(h, float))


def test_interior_optimum():
    res = solve(two_leaf([[1.0], [-1.0]], [0.0, 10.0]))
    assert res.converged
    assert res.v[0] == pytest.approx(0.5, abs=1e-10)
    assert res.value == pytest.approx(math.log(1.5), abs=1e-12)
    assert np.all(res.multipliers <= 1e-12)


def test_binding_bound_and_multiplier():
    res = solve(two_leaf([[-1.0]], [0.2]))
    assert res.converged
    assert res.v[0] == pytest.approx(0.2, abs=1e-12)
    expected_nu = 0.5 * (1.0 / 1.2 - 1.0 / 1.8)
    assert res.multipliers[0] == pytest.approx(expected_nu, rel=1e-9)
    assert res.active[0]


def test_duplicate_rows_at_a_vertex():
    # the same bound listed three times: the multiplier split is not unique
    prog = two_leaf([[-1.0], [-1.0], [-1.0], [1.0]], [0.2, 0.2, 0.2, 0.0])
    res = solve(prog)
    assert res.converged
    assert res.v[0] == pytest.approx(0.2, abs=1e-12)
    assert res.multipliers[:3].sum() == pytest.approx(0.5 * (1.0 / 1.2 - 1.0 / 1.8), rel=1e-9)
    assert kkt_residual(prog, res.v, res.multipliers) <= 1e-9


def test_zero_variable_program():
    prog = ConcaveProgram(LOG, np.zeros((2, 0)), np.array([1.0, math.e]), np.array([0.5, 0.5]),
                          np.zeros((0, 0)), np.zeros(0))
    res = solve(prog)
    assert res.converged and res.value == pytest.approx(0.5)


def test_empty_interior_face():
    # v >= 0 and v <= 0 leave only v = 0
    res = solve(two_leaf([[1.0], [-1.0]], [0.0, 0.0]))
    assert res.converged
    assert res.v[0] == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), gamma=st.sampled_from([None, 0.5, -1.0]))
def test_random_programs_beat_random_feasible_points(seed, gamma):
    rng = np.random.default_rng(seed)
    m, L = int(rng.integers(1, 4)), int(rng.integers(2, 6))
    spec = LOG if gamma is None else UtilitySpec("power", gamma)
    A = rng.normal(size=(L, m))
    c = rng.uniform(0.5, 2.0, size=L)
    w = rng.dirichlet(np.ones(L))
    # box |v_i| <= 0.2 / (max row norm) keeps every leaf wealth positive
    r = 0.2 / max(np.abs(A).sum(axis=1).max(), 1e-9)
    G = np.vstack([np.eye(m), -np.eye(m)])
    h = np.full(2 * m, r)
    prog = ConcaveProgram(spec, A, c, w, G, h)
    res = solve(prog)
    assert res.converged
    assert np.all(prog.slack(res.v) >= -1e-12)
    for _ in range(50):
        v = rng.uniform(-r, r, size=m)
        assert prog.value(v) <= res.value + 1e-12
