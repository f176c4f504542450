"""Small dense concave programs of the form

    maximize   sum_l w_l U(A_l v + c_l)
    subject to G v + h >= 0

Used by both the frictional and the frictionless tree solvers. The solve runs a
log-barrier Newton method (mu_0 = 1, mu <- 0.2 mu, stop at mu <= 1e-10) and then
polishes the result with a primal active-set Newton method, which pins the
binding constraints exactly and brings stationarity down to rounding level.
Multipliers are recovered by non-negative least squares on the active rows.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import linprog, nnls

from .utility import UtilitySpec, evaluate, marginal, second_derivative

log = logging.getLogger(__name__)

MU0 = 1.0
MU_FACTOR = 0.2
MU_MIN = 1e-10
INNER_TOL = 1e-10


class SolverError(RuntimeError):
    """The optimizer could not produce a usable point."""


@dataclass
class ConcaveProgram:
    spec: UtilitySpec
    A: np.ndarray  # (L, m) leaf wealth coefficients
    c: np.ndarray  # (L,)   leaf wealth offsets (endowment included)
    weights: np.ndarray  # (L,) leaf probabilities
    G: np.ndarray  # (K, m) inequality rows, G v + h >= 0
    h: np.ndarray  # (K,)

    @property
    def n_vars(self) -> int:
        return self.A.shape[1]

    def wealth(self, v: np.ndarray) -> np.ndarray:
        return self.A @ v + self.c

    def slack(self, v: np.ndarray) -> np.ndarray:
        return self.G @ v + self.h

    def value(self, v: np.ndarray) -> float:
        w = self.wealth(v)
        if np.any(w <= 0.0):
            return -math.inf
        return math.fsum(self.weights * evaluate(self.spec, w))

    def grad(self, v: np.ndarray) -> np.ndarray:
        return self.A.T @ (self.weights * marginal(self.spec, self.wealth(v)))

    def hess(self, v: np.ndarray) -> np.ndarray:
        d2 = self.weights * second_derivative(self.spec, self.wealth(v))
        return (self.A.T * d2) @ self.A


@dataclass
class ProgramResult:
    v: np.ndarray
    value: float
    active: np.ndarray  # bool mask over constraint rows
    multipliers: np.ndarray  # (K,), zero off the active set
    iterations: int
    kkt_residual: float
    converged: bool
    polished: bool = False
    info: dict = field(default_factory=dict)


def kkt_residual(prog: ConcaveProgram, v: np.ndarray, nu: np.ndarray) -> float:
    """Max of stationarity, primal/dual infeasibility and complementarity violations."""
    if prog.n_vars == 0:
        return 0.0
    s = prog.slack(v)
    stat = prog.grad(v) + prog.G.T @ nu
    parts = [
        np.max(np.abs(stat), initial=0.0),
        np.max(-s, initial=0.0),
        np.max(-nu, initial=0.0),
        np.max(np.abs(nu * s), initial=0.0),
    ]
    return float(max(parts))


def _interior_point(prog: ConcaveProgram) -> tuple[np.ndarray, float]:
    """Max-min-slack point of {G v + h >= t, A v + c >= t}, t <= 1."""
    m = prog.n_vars
    rows = np.vstack([prog.G, prog.A])
    offs = np.concatenate([prog.h, prog.c])
    # variables (v, t): maximize t  s.t.  -rows v + t <= offs
    A_ub = np.hstack([-rows, np.ones((rows.shape[0], 1))])
    cost = np.zeros(m + 1)
    cost[-1] = -1.0
    bound = 1e6 * (1.0 + np.max(np.abs(offs), initial=0.0))
    bounds = [(-bound, bound)] * m + [(None, 1.0)]
    res = linprog(cost, A_ub=A_ub, b_ub=offs, bounds=bounds, method="highs")
    if res.status != 0:
        raise SolverError(f"interior-point search failed: {res.message}")
    return res.x[:m], float(res.x[-1])


def _barrier(prog: ConcaveProgram, v: np.ndarray, max_newton: int = 200) -> tuple[np.ndarray, int, float]:
    mu = MU0
    iters = 0
    G = prog.G

    def phi(x: np.ndarray) -> float:
        s = prog.slack(x)
        w = prog.wealth(x)
        if np.any(s <= 0.0) or np.any(w <= 0.0):
            return -math.inf
        return prog.value(x) + mu * math.fsum(np.log(s))

    while True:
        for _ in range(max_newton):
            s = prog.slack(v)
            g = prog.grad(v) + mu * (G.T @ (1.0 / s))
            H = prog.hess(v) - mu * ((G.T / (s * s)) @ G)
            try:
                L = np.linalg.cholesky(-H)
                d = np.linalg.solve(L.T, np.linalg.solve(L, g))
            except np.linalg.LinAlgError:
                d = np.linalg.lstsq(-H, g, rcond=None)[0]
            dec = float(g @ d)
            iters += 1
            if dec / 2.0 <= INNER_TOL * (1.0 + abs(prog.value(v))):
                break
            f0 = phi(v)
            alpha = 1.0
            for _ in range(80):
                cand = v + alpha * d
                if phi(cand) >= f0 + 0.25 * alpha * dec:
                    break
                alpha *= 0.5
            else:
                break
            v = cand
        if mu <= MU_MIN:
            return v, iters, mu
        mu *= MU_FACTOR


def _null(GA: np.ndarray, m: int) -> np.ndarray:
    if GA.shape[0] == 0:
        return np.eye(m)
    return null_space(GA, rcond=1e-12)


def _project(prog: ConcaveProgram, v: np.ndarray, active: np.ndarray) -> np.ndarray:
    if not active.any():
        return v
    GA = prog.G[active]
    r = GA @ v + prog.h[active]
    return v - np.linalg.lstsq(GA, r, rcond=None)[0]


def _is_independent(basis: np.ndarray, row: np.ndarray) -> tuple[bool, np.ndarray]:
    resid = row - basis.T @ (basis @ row) if basis.shape[0] else row
    norm = np.linalg.norm(resid)
    ok = norm > 1e-10 * max(np.linalg.norm(row), 1e-300)
    return ok, (resid / norm if ok else resid)


def _independent_rows(G: np.ndarray, mask: np.ndarray, slack: np.ndarray) -> np.ndarray:
    """Subset of the masked rows, tightest first, keeping only linearly independent ones."""
    out = np.zeros_like(mask)
    basis = np.zeros((0, G.shape[1]))
    for j in sorted(np.flatnonzero(mask), key=lambda i: slack[i]):
        ok, q = _is_independent(basis, G[j])
        if ok:
            basis = np.vstack([basis, q])
            out[j] = True
    return out


def _orthonormal(G: np.ndarray, active: np.ndarray) -> np.ndarray:
    if not active.any():
        return np.zeros((0, G.shape[1]))
    q, _ = np.linalg.qr(G[active].T)
    return q.T


def _newton_step(prog: ConcaveProgram, v: np.ndarray, N: np.ndarray) -> np.ndarray:
    """Newton direction restricted to range(N), solved as a least-squares problem.

    With q = w U'(wealth) and r = sqrt(-w U''(wealth)) the reduced system
    N'A' diag(r^2) A N dt = N'A' q is the normal equation of
    min |diag(r) A N dt - q / r|, which is solved directly to avoid squaring
    the condition number.
    """
    wealth = prog.wealth(v)
    q = prog.weights * marginal(prog.spec, wealth)
    r = np.sqrt(-prog.weights * second_derivative(prog.spec, wealth))
    keep = r > 0.0
    B = (r[keep, None] * prog.A[keep]) @ N
    dt = np.linalg.lstsq(B, q[keep] / r[keep], rcond=None)[0]
    return N @ dt


def polish(
    prog: ConcaveProgram,
    v: np.ndarray,
    active: np.ndarray,
    max_changes: int = 200,
) -> ProgramResult | None:
    """Primal active-set Newton from a (nearly) feasible ``v``; None on failure.

    The working set is kept linearly independent. At a stationary point of the
    working face, multipliers come from least squares on the working rows; if one
    is negative that row is released, unless non-negative multipliers exist on
    the larger set of all tight rows (degenerate vertex), in which case the point
    is optimal.
    """
    m = prog.n_vars
    K = prog.G.shape[0]
    G = prog.G
    hscale = 1.0 + np.abs(prog.h)
    active = _independent_rows(G, active, prog.slack(v))
    v = _project(prog, v, active)
    for _ in range(5):
        s = prog.slack(v)
        bad = np.flatnonzero((s < 0.0) & ~active)
        if bad.size == 0:
            break
        basis = _orthonormal(G, active)
        for j in bad[np.argsort(s[bad])]:
            ok, qrow = _is_independent(basis, G[j])
            if ok:
                basis = np.vstack([basis, qrow])
                active[j] = True
        v = _project(prog, v, active)
    if np.any(prog.slack(v) < -1e-10 * hscale) or np.any(prog.wealth(v) <= 0.0):
        log.debug("polish: infeasible after projection (slack %.3g)", prog.slack(v).min())
        return None

    iters = 0
    for _ in range(max_changes):
        N = _null(G[active], m)
        blocked = None
        for _ in range(100):
            if N.shape[1] == 0:
                break
            iters += 1
            g = prog.grad(v)
            gscale = 1.0 + np.max(np.abs(g), initial=0.0)
            if np.max(np.abs(N.T @ g), initial=0.0) <= 1e-14 * gscale:
                break
            d = _newton_step(prog, v, N)
            slope = float(g @ d)
            if not slope > 0.0:
                break
            Gd = G @ d
            s = prog.slack(v)
            tiny = 1e-13 * np.linalg.norm(G, axis=1) * np.linalg.norm(d)
            cand = (~active) & (Gd < -tiny)
            alpha_max = math.inf
            j_block = None
            if cand.any():
                ratios = np.full(K, math.inf)
                ratios[cand] = np.maximum(s[cand], 0.0) / -Gd[cand]
                j_block = int(np.argmin(ratios))
                alpha_max = float(ratios[j_block])
            alpha = min(1.0, alpha_max)
            f0 = prog.value(v)
            while alpha > 1e-20:
                trial = v + alpha * d
                if np.all(prog.wealth(trial) > 0.0) and (
                    prog.value(trial) >= f0 + 1e-4 * alpha * slope - 4e-16 * (1.0 + abs(f0))
                ):
                    break
                alpha *= 0.5
            else:
                break
            v_old = v
            v = v + alpha * d
            if j_block is not None and alpha == alpha_max and alpha_max <= 1.0:
                blocked = j_block
                break
            if np.max(np.abs(v - v_old)) <= 1e-16 * (1.0 + np.max(np.abs(v))):
                break
        if blocked is not None:
            active[blocked] = True
            v = _project(prog, v, active)
            continue

        g = prog.grad(v)
        gscale = 1.0 + np.max(np.abs(g), initial=0.0)
        nu = np.zeros(K)
        if not active.any():
            if np.max(np.abs(g)) > 1e-11 * gscale:
                log.debug("polish: unconstrained gradient %.3g", np.max(np.abs(g)))
                return None
        else:
            idx = np.flatnonzero(active)
            lam_ls = np.linalg.lstsq(G[active].T, -g, rcond=None)[0]
            if lam_ls.min() < -1e-12 * gscale:
                s = prog.slack(v)
                tight = active | (np.abs(s) <= 1e-12 * hscale)
                if tight.sum() > active.sum():
                    nu_t, resid_t = nnls(G[tight].T, -g, maxiter=50 * K)
                    if resid_t <= 1e-11 * gscale:
                        nu[tight] = nu_t
                        return ProgramResult(v, prog.value(v), tight, nu, iters,
                                             kkt_residual(prog, v, nu), True, polished=True)
                active[idx[int(np.argmin(lam_ls))]] = False
                continue
            nu[idx] = np.maximum(lam_ls, 0.0)
        s = prog.slack(v)
        if np.any(s < -1e-12 * hscale):
            log.debug("polish: final point infeasible (%.3g)", s.min())
            return None
        return ProgramResult(v, prog.value(v), active, nu, iters, kkt_residual(prog, v, nu), True, polished=True)
    log.debug("polish: active-set change limit reached")
    return None


def solve(
    prog: ConcaveProgram,
    *,
    warm_start: np.ndarray | None = None,
    warm_active: np.ndarray | None = None,
    kkt_tol: float = 1e-8,
) -> ProgramResult:
    m = prog.n_vars
    K = prog.G.shape[0]
    if m == 0:
        value = prog.value(np.zeros(0))
        return ProgramResult(np.zeros(0), value, np.zeros(K, bool), np.zeros(K), 0, 0.0, True)

    if warm_start is not None and warm_active is not None:
        res = polish(prog, np.asarray(warm_start, float), np.asarray(warm_active, bool))
        if res is not None and res.kkt_residual <= kkt_tol * (1.0 + abs(res.value)):
            res.info["path"] = "warm"
            return res

    v0, t = _interior_point(prog)
    if t <= 1e-12:
        # no strictly feasible point: the feasible set is a face; polish on it directly
        active = prog.slack(v0) <= 1e-12
        res = polish(prog, v0, active)
        if res is None:
            raise SolverError("feasible set has empty interior and polishing failed")
        res.converged = res.kkt_residual <= kkt_tol * (1.0 + abs(res.value))
        res.info["path"] = "face"
        return res

    v, iters, mu = _barrier(prog, v0)
    s = prog.slack(v)
    # candidate active sets: barrier multiplier dominates slack, then plain thresholds
    guesses = [mu / s > s, s < 10.0 * math.sqrt(mu), s < 1e-9 * (1.0 + np.abs(prog.h))]
    best = None
    for guess in guesses:
        res = polish(prog, v, guess)
        if res is None:
            continue
        res.iterations += iters
        res.converged = res.kkt_residual <= kkt_tol * (1.0 + abs(res.value))
        res.info["path"] = "barrier+polish"
        if res.converged:
            return res
        if best is None or res.kkt_residual < best.kkt_residual:
            best = res
    if best is not None:
        return best

    log.debug("active-set polish failed; returning barrier iterate")
    nu = mu / s
    value = prog.value(v)
    r = kkt_residual(prog, v, nu)
    return ProgramResult(v, value, s < 10.0 * math.sqrt(mu), nu, iters, r,
                         r <= kkt_tol * (1.0 + abs(value)), info={"path": "barrier"})
