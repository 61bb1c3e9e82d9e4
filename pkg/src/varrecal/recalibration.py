"""Proxy-reliance-scaled conformal recalibration of a lower-tail quantile.

A calibration block of realized targets ``y``, baseline quantiles ``q`` and
proxies ``v`` gives signed residuals ``(y - q) / v**rho``; their lower
empirical alpha-quantile ``c`` is the recalibration constant and the
adjusted forecast is ``q_t + c * v_t**rho``. ``rho`` may depend on the
regime label of each date.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .errors import BadOrdering, EmptySample, MissingRegime, NonpositiveProxy
from .state_model import PROXY_FLOOR


@dataclass(frozen=True, order=True)
class ScalarRule:
    rho: float

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")

    @property
    def components(self) -> Tuple[float, float, float]:
        return (self.rho, self.rho, self.rho)

    def exponents(self, regimes=None, n: Optional[int] = None) -> np.ndarray:
        if n is None:
            n = 1 if regimes is None else np.size(regimes)
        return np.full(n, float(self.rho))

    def __str__(self):
        return f"rho={self.rho:g}"


@dataclass(frozen=True, order=True)
class RegimeRule:
    """Regime-specific reliance with ``low >= mid >= high``."""

    low: float
    mid: float
    high: float

    def __post_init__(self):
        for r in self.components:
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"rho components must lie in [0, 1], got {self.components}")
        if not self.low >= self.mid >= self.high:
            raise ValueError(f"regime rule must be monotone (low >= mid >= high), got {self.components}")

    @property
    def components(self) -> Tuple[float, float, float]:
        return (self.low, self.mid, self.high)

    def exponents(self, regimes=None, n: Optional[int] = None) -> np.ndarray:
        if regimes is None:
            raise MissingRegime("regime labels are required for a regime rule")
        g = np.asarray(regimes)
        if g.size and (np.any(g < 0) or np.any(g > 2)):
            raise MissingRegime("regime labels must be 0 (low), 1 (mid) or 2 (high)")
        return np.asarray(self.components)[g.astype(int)]

    def __str__(self):
        return "rho=({:g},{:g},{:g})".format(*self.components)


RecalRule = Union[ScalarRule, RegimeRule]


@dataclass(frozen=True)
class CalibratedRule:
    rule: RecalRule
    c: float
    calib_size: int
    origin: Optional[object] = None


def order_index(n: int, alpha: float) -> int:
    """1-based order statistic used for the lower alpha-quantile."""
    # the epsilon keeps e.g. 0.29 * 100 from flooring to 28
    return max(1, int(math.floor(alpha * (n + 1) + 1e-9)))


def lower_quantile(sample, alpha: float, axis: int = -1):
    """k-th smallest value with ``k = max(1, floor(alpha * (n + 1)))``.

    Positively homogeneous and monotone. Works along ``axis`` for 2-D input.
    """
    x = np.asarray(sample, dtype=float)
    n = x.shape[axis] if x.ndim else 0
    if n == 0:
        raise EmptySample("cannot take a quantile of an empty sample")
    k = order_index(n, alpha)
    part = np.partition(x, k - 1, axis=axis)
    return float(np.take(part, k - 1, axis=axis)) if x.ndim == 1 else np.take(part, k - 1, axis=axis)


def proxy_power(v, rho):
    """``v ** rho`` as ``exp(rho * log v)``; exactly 1 where ``rho == 0`` and
    exactly ``v`` where ``rho == 1``."""
    v = np.maximum(np.asarray(v, dtype=float), PROXY_FLOOR)
    rho = np.asarray(rho, dtype=float)
    with np.errstate(over="ignore"):
        out = np.exp(rho * np.log(v))
    out = np.where(rho == 1.0, v, out)
    return np.where(rho == 0.0, 1.0, out)


def signed_residuals(y, q, v, rule: RecalRule, regimes=None) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    exps = rule.exponents(regimes, n=y.size)
    return (y - np.asarray(q, dtype=float)) / proxy_power(v, exps)


def calibrate(rule: RecalRule, y, q, v, alpha: float, regimes=None, origin=None) -> CalibratedRule:
    u = signed_residuals(y, q, v, rule, regimes)
    return CalibratedRule(rule, lower_quantile(u, alpha), int(u.size), origin)


def apply(cal: CalibratedRule, q_t, v_t, g_t=None):
    """Adjusted forecast ``q_t + c * v_t ** rho_eff``."""
    q_t = np.asarray(q_t, dtype=float)
    exps = cal.rule.exponents(None if g_t is None else np.atleast_1d(g_t), n=q_t.size)
    out = q_t + cal.c * proxy_power(v_t, exps.reshape(q_t.shape))
    return float(out) if out.ndim == 0 else out


def calibrate_many(exponents: np.ndarray, y, q, v, alpha: float) -> np.ndarray:
    """Recalibration constants for many candidate rules at once.

    ``exponents`` has shape (K, n): the effective exponent of each candidate
    on each calibration date.
    """
    u = (np.asarray(y, dtype=float) - np.asarray(q, dtype=float)) / proxy_power(v, exponents)
    return lower_quantile(u, alpha, axis=1)


def adjustment(v, c, rho):
    """Signed adjustment ``c * v ** rho``."""
    if np.any(np.asarray(v) <= 0):
        raise NonpositiveProxy("proxy level must be positive")
    out = c * proxy_power(v, rho)
    return float(out) if np.ndim(out) == 0 else out


def contrast_ratio(v_high, v_low, rho):
    """``(v_high / v_low) ** rho``, the cross-state adjustment contrast."""
    if not v_high > v_low > 0:
        raise BadOrdering("need v_high > v_low > 0")
    out = proxy_power(v_high / v_low, rho)
    return float(out) if np.ndim(out) == 0 else out


def rule_from_components(components: Sequence[float], scalar: bool) -> RecalRule:
    return ScalarRule(components[0]) if scalar else RegimeRule(*components)
