"""Log and power utilities on (0, inf) with exact marginal utility and conjugate."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

NEG_INF = -math.inf


@dataclass(frozen=True)
class UtilitySpec:
    family: str
    gamma: float | None = None

    def __post_init__(self) -> None:
        if self.family == "log":
            if self.gamma is not None:
                raise ValueError("log utility takes no gamma")
        elif self.family == "power":
            g = self.gamma
            if g is None or not math.isfinite(g) or g >= 1.0 or g == 0.0:
                raise ValueError(f"power utility needs gamma < 1, gamma != 0; got {g!r}")
        else:
            raise ValueError(f"unknown utility family {self.family!r}")

    @classmethod
    def from_config(cls, cfg: Mapping) -> "UtilitySpec":
        fam = cfg.get("family")
        gamma = cfg.get("gamma")
        return cls(str(fam), None if gamma is None else float(gamma))

    def to_config(self) -> dict:
        if self.family == "log":
            return {"family": "log"}
        return {"family": "power", "gamma": self.gamma}


LOG = UtilitySpec("log")


def evaluate(spec: UtilitySpec, w):
    """U(w), with U = -inf for w <= 0. Accepts scalars or arrays."""
    arr = np.asarray(w, dtype=float)
    out = np.full(arr.shape, NEG_INF)
    pos = arr > 0.0
    if spec.family == "log":
        out[pos] = np.log(arr[pos])
    else:
        g = spec.gamma
        out[pos] = arr[pos] ** g / g
    return float(out) if out.ndim == 0 else out


def marginal(spec: UtilitySpec, w):
    arr = np.asarray(w, dtype=float)
    if np.any(arr <= 0.0):
        raise ValueError("marginal utility is defined for w > 0 only")
    out = 1.0 / arr if spec.family == "log" else arr ** (spec.gamma - 1.0)
    return float(out) if np.ndim(out) == 0 else out


def second_derivative(spec: UtilitySpec, w):
    arr = np.asarray(w, dtype=float)
    if spec.family == "log":
        out = -1.0 / (arr * arr)
    else:
        g = spec.gamma
        out = (g - 1.0) * arr ** (g - 2.0)
    return float(out) if np.ndim(out) == 0 else out


def conjugate(spec: UtilitySpec, y):
    """V(y) = sup_{w>0} U(w) - w y."""
    arr = np.asarray(y, dtype=float)
    if np.any(arr <= 0.0):
        raise ValueError("conjugate is defined for y > 0 only")
    if spec.family == "log":
        out = -np.log(arr) - 1.0
    else:
        g = spec.gamma
        out = (1.0 - g) / g * arr ** (g / (g - 1.0))
    return float(out) if np.ndim(out) == 0 else out


def inverse_marginal(spec: UtilitySpec, y):
    arr = np.asarray(y, dtype=float)
    out = 1.0 / arr if spec.family == "log" else arr ** (1.0 / (spec.gamma - 1.0))
    return float(out) if np.ndim(out) == 0 else out


def utility_difference(spec: UtilitySpec, w, dw):
    """U(w + dw) - U(w) without cancellation, for w > 0 and w + dw > 0."""
    w = np.asarray(w, dtype=float)
    r = np.log1p(np.asarray(dw, dtype=float) / w)
    if spec.family == "log":
        out = r
    else:
        g = spec.gamma
        out = w**g / g * np.expm1(g * r)
    return float(out) if np.ndim(out) == 0 else out


def asymptotic_elasticity(spec: UtilitySpec) -> float:
    """limsup_{x->inf} x U'(x) / U(x) for the admitted families."""
    if spec.family == "log":
        return 0.0
    return spec.gamma if spec.gamma > 0.0 else 0.0


def asymptotic_elasticity_ok(spec: UtilitySpec) -> bool:
    return asymptotic_elasticity(spec) < 1.0


def expected_utility(spec: UtilitySpec, probs, wealth) -> float:
    """sum_i p_i U(w_i); any non-positive wealth with positive weight gives -inf."""
    probs = np.asarray(probs, dtype=float)
    wealth = np.asarray(wealth, dtype=float)
    live = probs > 0.0
    if np.any(wealth[live] <= 0.0):
        return NEG_INF
    return math.fsum(probs[live] * evaluate(spec, wealth[live]))
