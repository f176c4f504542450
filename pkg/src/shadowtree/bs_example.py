"""Black-Scholes stock frozen after T/2 with a negative random endowment.

The stock is ``S_t = exp(B_t + t/2)`` on [0, T/2] and constant afterwards. The
agent starts with one unit of cash and receives ``e_T = -beta (1 - lambda) S_{T/2}``
at the horizon, with ``beta`` uniform on (0, 1) and independent of the price path.
Converting all cash to stock at time 0 and selling at the bid at T/2 keeps the
final wealth ``(1 - beta)(1 - lambda) S_{T/2}`` positive on every path, and

    S~_t = S_t exp(2 ln(1 - lambda) t / T),   t in [0, T/2]

is a frictionless price inside the spread under which that strategy loses nothing.

Randomness is keyed per path: the Gaussian increments of path ``i`` come from a
Philox stream seeded with ``(seed, "gauss", i)`` (the k-th draw is step k) and the
endowment factor from ``(seed, "beta", i)``, so any prefix of paths is reproducible
on its own and beta never shares a stream with the prices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .utility import UtilitySpec

_TAGS = {"gauss": 0x6761757373, "beta": 0x62657461}
_BETA_BITS = 53


@dataclass(frozen=True)
class BsParams:
    T: float = 2.0
    lam: float = 0.1
    grid_points: int = 64
    n_paths: int = 100_000
    seed: int = 42

    def __post_init__(self) -> None:
        if not (self.T > 0.0 and math.isfinite(self.T)):
            raise ValueError("T must be positive")
        if not 0.0 <= self.lam < 1.0:
            raise ValueError("lambda must lie in [0, 1)")
        if self.grid_points < 2:
            raise ValueError("grid_points must be >= 2")
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit non-negative integer")

    @property
    def times(self) -> np.ndarray:
        t = np.linspace(0.0, self.T / 2.0, self.grid_points)
        t[0], t[-1] = 0.0, self.T / 2.0
        return t


@dataclass
class PathEnsemble:
    s_paths: np.ndarray  # (n_paths, grid_points)
    beta: np.ndarray  # (n_paths,)
    seed: int
    times: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    @property
    def n_paths(self) -> int:
        return self.s_paths.shape[0]

    def brownian(self) -> np.ndarray:
        """B_t = ln S_t - t/2 on the grid."""
        return np.log(self.s_paths) - self.times / 2.0


def _stream(seed: int, tag: str, path: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, _TAGS[tag], path])))


def simulate_paths(params: BsParams) -> PathEnsemble:
    """Exact GBM transitions on the grid of [0, T/2] plus independent uniform beta."""
    t = params.times
    dt = np.diff(t)
    steps = params.grid_points - 1
    n = params.n_paths
    z = np.empty((n, steps))
    k = np.empty(n, dtype=np.uint64)
    for i in range(n):
        z[i] = _stream(params.seed, "gauss", i).standard_normal(steps)
        k[i] = _stream(params.seed, "beta", i).integers(0, 2**_BETA_BITS, dtype=np.uint64)
    log_inc = z * np.sqrt(dt) + dt / 2.0
    log_s = np.zeros((n, params.grid_points))
    np.cumsum(log_inc, axis=1, out=log_s[:, 1:])
    s = np.exp(log_s)
    beta = (k.astype(float) + 0.5) / 2.0**_BETA_BITS  # strictly inside (0, 1)
    return PathEnsemble(s, beta, params.seed, t)


def buy_hold_sell(ensemble: PathEnsemble, lam: float) -> np.ndarray:
    """Terminal bond of: buy one share at S_0 = 1, sell it at the bid at T/2."""
    return (1.0 - lam) * ensemble.s_paths[:, -1]


def explicit_shadow(ensemble: PathEnsemble, params: BsParams) -> np.ndarray:
    """S~ on the grid; the last column is the frozen value (1 - lambda) S_{T/2}.

    exp(B_t + (1/2 + 2 ln(1 - lambda)/T) t) is evaluated as S_t times the
    deterministic factor exp(2 ln(1 - lambda) t / T), clamped to its analytic
    range [1 - lambda, 1] so rounding cannot push S~ outside the spread.
    """
    t = ensemble.times
    log_ratio = 2.0 * math.log1p(-params.lam) / params.T * t
    factor = np.clip(np.exp(log_ratio), 1.0 - params.lam, 1.0)
    factor[0] = 1.0
    out = ensemble.s_paths * factor
    out[:, -1] = (1.0 - params.lam) * ensemble.s_paths[:, -1]
    return out


@dataclass
class SandwichReport:
    holds: bool
    violations: int
    min_log_ratio: float
    max_log_ratio: float
    log_lower_bound: float


def sandwich_check(ensemble: PathEnsemble, params: BsParams, shadow: np.ndarray | None = None) -> SandwichReport:
    """(1 - lambda) S <= S~ <= S at every grid time of every path, with no tolerance."""
    st = explicit_shadow(ensemble, params) if shadow is None else shadow
    s = ensemble.s_paths
    lo = (1.0 - params.lam) * s
    bad = int(np.count_nonzero((st < lo) | (st > s)))
    ratio = np.log(st / s)
    return SandwichReport(bad == 0, bad, float(ratio.min()), float(ratio.max()), math.log1p(-params.lam))


def closed_form_log_value(params: BsParams) -> float:
    """E[ln((1 - beta)(1 - lambda) S_{T/2})] = -1 + ln(1 - lambda) + T/4."""
    return -1.0 + math.log1p(-params.lam) + params.T / 4.0


@dataclass
class UtilityEstimate:
    frictional: float
    frictional_se: float
    frictionless: float
    frictionless_se: float
    max_abs_path_difference: float
    wealth_max_abs_difference: float
    closed_form: float
    z_score: float


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    n = x.size
    mean = math.fsum(x) / n
    if n < 2:
        return mean, math.nan
    var = math.fsum((x - mean) ** 2) / (n - 1)
    return mean, math.sqrt(var / n)


def estimate_utilities(ensemble: PathEnsemble, params: BsParams, utility: UtilitySpec) -> UtilityEstimate:
    """Monte Carlo value of buy-hold-sell with frictions and under S~ (log utility only)."""
    if utility.family != "log":
        raise ValueError("the example is stated for log utility only")
    wealth = buy_hold_sell(ensemble, params.lam)
    endowment = -ensemble.beta * wealth
    shadow_wealth = explicit_shadow(ensemble, params)[:, -1]
    u_fric = np.log(wealth + endowment)
    u_free = np.log(shadow_wealth + endowment)
    a, sa = _mean_se(u_fric)
    b, sb = _mean_se(u_free)
    cf = closed_form_log_value(params)
    return UtilityEstimate(
        frictional=a,
        frictional_se=sa,
        frictionless=b,
        frictionless_se=sb,
        max_abs_path_difference=float(np.max(np.abs(u_fric - u_free))),
        wealth_max_abs_difference=float(np.max(np.abs(wealth - shadow_wealth))),
        closed_form=cf,
        z_score=(a - cf) / sa if sa > 0 else math.inf,
    )


# ---------------------------------------------------------------------------
# maximality probe

CATALOG = ("scaled-buy", "delayed-buy", "early-sell", "partial-liquidation")
REFERENCES = ("buy-hold-sell", "hold-cash")
MAX_LISTED_WITNESSES = 10


def _grid_index(t: np.ndarray, when: float) -> int:
    j = int(np.argmin(np.abs(t - when)))
    if not 0 < j < len(t) - 1:
        raise ValueError(f"time {when} must fall strictly inside (0, T/2) on the grid")
    return j


def alternative_wealth(ensemble: PathEnsemble, params: BsParams, descriptor: str) -> tuple[str, float | None, np.ndarray]:
    """Terminal bond of a catalog strategy, started from one unit of cash."""
    name, _, arg = descriptor.partition(":")
    value = float(arg) if arg else None
    s = ensemble.s_paths
    t = ensemble.times
    bid = 1.0 - params.lam
    s_end = s[:, -1]
    if name == "buy-hold-sell":
        return name, None, bid * s_end
    if name == "hold-cash":
        return name, None, np.ones(ensemble.n_paths)
    if name == "scaled-buy":
        theta = 0.9 if value is None else value
        if not 0.0 <= theta < 1.0:
            raise ValueError("scaled-buy needs theta in [0, 1)")
        return name, theta, (1.0 - theta) + theta * bid * s_end
    if len(t) < 3:
        raise ValueError(f"{name} needs an interior grid time (grid_points >= 3)")
    if name == "delayed-buy":
        when = params.T / 4.0 if value is None else value
        j = _grid_index(t, when)
        return name, float(t[j]), bid * s_end / s[:, j]
    if name == "early-sell":
        when = params.T / 4.0 if value is None else value
        j = _grid_index(t, when)
        return name, float(t[j]), bid * s[:, j]
    if name == "partial-liquidation":
        q = 0.5 if value is None else value
        if not 0.0 < q <= 1.0:
            raise ValueError("partial-liquidation needs a fraction in (0, 1]")
        j = (len(t) - 1) // 2
        return name, q, q * bid * s[:, j] + (1.0 - q) * bid * s_end
    raise ValueError(f"unknown alternative {descriptor!r}; catalog: {', '.join(CATALOG + REFERENCES)}")


@dataclass
class ProbeReport:
    alternative: str
    parameter: float | None
    witnesses: int
    probability: float
    witness_paths: list[int]
    expected_utility: float
    dominated_fraction: float  # paths where the alternative ends below buy-hold-sell
    k_witnesses: dict[str, int]


def maximality_probe(ensemble: PathEnsemble, params: BsParams, alternative: str) -> ProbeReport:
    """Count paths where the alternative plus the endowment ends negative."""
    name, par, wealth = alternative_wealth(ensemble, params, alternative)
    reference = buy_hold_sell(ensemble, params.lam)
    total = wealth - ensemble.beta * reference
    idx = np.flatnonzero(total < 0.0)
    n = ensemble.n_paths
    if idx.size:
        eu = -math.inf
    else:
        eu = math.fsum(np.log(total)) / n if np.all(total > 0.0) else -math.inf
    kw = {}
    for k in (2, 5, 10, 20, 50):
        mask = (wealth < (1.0 - 1.0 / k) * reference) & (1.0 - ensemble.beta < 1.0 / k)
        kw[str(k)] = int(np.count_nonzero(mask))
    return ProbeReport(
        alternative=name,
        parameter=par,
        witnesses=int(idx.size),
        probability=idx.size / n,
        witness_paths=[int(i) for i in idx[:MAX_LISTED_WITNESSES]],
        expected_utility=eu,
        dominated_fraction=float(np.count_nonzero(wealth < reference)) / n,
        k_witnesses=kw,
    )


def beta_price_correlation(ensemble: PathEnsemble) -> float:
    return float(np.corrcoef(ensemble.beta, np.log(ensemble.s_paths[:, -1]))[0, 1])
