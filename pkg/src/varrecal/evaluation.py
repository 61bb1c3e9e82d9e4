"""Exceedance metrics and VaR backtests (Kupiec UC, Christoffersen CC,
Engle-Manganelli DQ)."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.special import xlogy
from scipy.stats import chi2

from .errors import LengthMismatch, TooShort

__all__ = [
    "TestResult", "MetricsSummary", "exceedance", "stress_exceedance", "avg_capital", "tick_loss",
    "kupiec_lr", "kupiec_uc", "transition_counts", "independence_lr", "christoffersen_cc", "dq_test",
    "summarize", "DistortionCurve", "TheoryReport", "distortion_curve", "run_theory_suite",
]

NOMINAL = 0.05
TEST_LEVEL = 0.05


@dataclass(frozen=True)
class TestResult:
    statistic: float
    pvalue: float
    dof: int
    passed: bool
    note: str = ""

    __test__ = False  # not a pytest class


def _result(stat: float, dof: int, note: str = "") -> TestResult:
    p = float(chi2.sf(stat, dof))
    return TestResult(float(stat), p, dof, bool(p >= TEST_LEVEL), note)


def exceedance(hits) -> float:
    h = np.asarray(hits, dtype=float)
    if h.size == 0:
        raise ValueError("no hits to average")
    return float(h.mean())


def stress_exceedance(hits, flags) -> Optional[float]:
    """Breach frequency on flagged dates; ``None`` when nothing is flagged."""
    h = np.asarray(hits, dtype=float)
    f = np.asarray(flags, dtype=bool)
    if not f.any():
        return None
    return float(h[f].mean())


def avg_capital(forecasts) -> float:
    return float(np.maximum(-np.asarray(forecasts, dtype=float), 0.0).mean())


def tick_loss(y, q, alpha: float) -> float:
    y = np.asarray(y, dtype=float)
    q = np.asarray(q, dtype=float)
    if y.shape != q.shape:
        raise LengthMismatch(f"length mismatch: {y.shape} vs {q.shape}")
    d = y - q
    return float(np.mean((alpha - (d < 0)) * d))


def kupiec_lr(n: int, x: int, alpha: float) -> float:
    """Unconditional-coverage likelihood ratio with 0*log(0) := 0."""
    p = x / n
    ll_null = xlogy(x, alpha) + xlogy(n - x, 1 - alpha)
    ll_alt = xlogy(x, p) + xlogy(n - x, 1 - p)
    return float(max(0.0, -2.0 * (ll_null - ll_alt)))


def kupiec_uc(n: int, x: int, alpha: float) -> TestResult:
    if n < 1 or not 0 <= x <= n:
        raise ValueError("need n >= 1 and 0 <= x <= n")
    return _result(kupiec_lr(n, x, alpha), 1)


def transition_counts(hits):
    h = np.asarray(hits, dtype=int)
    prev, cur = h[:-1], h[1:]
    n00 = int(np.sum((prev == 0) & (cur == 0)))
    n01 = int(np.sum((prev == 0) & (cur == 1)))
    n10 = int(np.sum((prev == 1) & (cur == 0)))
    n11 = int(np.sum((prev == 1) & (cur == 1)))
    return n00, n01, n10, n11


def independence_lr(hits) -> float:
    n00, n01, n10, n11 = transition_counts(hits)
    if n01 + n11 == 0 or n00 + n10 == 0:
        return 0.0
    pi = (n01 + n11) / (n00 + n01 + n10 + n11)
    pi01 = n01 / (n00 + n01) if n00 + n01 else 0.0
    pi11 = n11 / (n10 + n11) if n10 + n11 else 0.0
    ll0 = xlogy(n00 + n10, 1 - pi) + xlogy(n01 + n11, pi)
    ll1 = xlogy(n00, 1 - pi01) + xlogy(n01, pi01) + xlogy(n10, 1 - pi11) + xlogy(n11, pi11)
    return float(max(0.0, -2.0 * (ll0 - ll1)))


def christoffersen_cc(hits, alpha: float) -> TestResult:
    """LR_cc = LR_uc + LR_ind, referred to chi-square with 2 dof."""
    h = np.asarray(hits, dtype=int)
    if h.size < 2:
        raise TooShort("conditional coverage needs at least two hits")
    lr = kupiec_lr(h.size, int(h.sum()), alpha) + independence_lr(h)
    return _result(lr, 2)


def dq_test(hits, forecasts, alpha: float, lags: int = 4) -> TestResult:
    """Dynamic quantile test.

    Regress ``I_t - alpha`` on an intercept, ``lags`` lagged hits and the
    current forecast; the statistic is the explained sum of squares over
    ``alpha (1 - alpha)``. A rank-deficient design is handled by the
    pseudo-inverse and flagged in ``note``.
    """
    h = np.asarray(hits, dtype=float)
    q = np.asarray(forecasts, dtype=float)
    if h.shape != q.shape:
        raise LengthMismatch("hits and forecasts must align")
    if h.size <= lags + 10:
        raise TooShort(f"DQ test needs more than {lags + 10} observations")
    dep = h[lags:] - alpha
    cols = [np.ones(dep.size)] + [h[lags - k : h.size - k] for k in range(1, lags + 1)] + [q[lags:]]
    X = np.column_stack(cols)
    rank = int(np.linalg.matrix_rank(X))
    b = np.linalg.pinv(X) @ dep
    fitted = X @ b
    stat = float(fitted @ fitted / (alpha * (1 - alpha)))
    note = "" if rank == X.shape[1] else f"rank_deficient:{rank}/{X.shape[1]}"
    return _result(stat, lags + 2, note)


@dataclass(frozen=True)
class MetricsSummary:
    n: int
    exceedance: float
    strict_exceedance: Optional[float]
    strict_count: int
    stress_gap: Optional[float]
    avg_capital: float
    stressed_avg_capital: Optional[float]
    tick_loss: float
    uc: TestResult
    cc: TestResult
    dq: Optional[TestResult]

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(y, q, strict_flags, alpha: float = NOMINAL, lags: int = 4) -> MetricsSummary:
    """All reported metrics for one forecast stream, in its given order."""
    y = np.asarray(y, dtype=float)
    q = np.asarray(q, dtype=float)
    flags = np.asarray(strict_flags, dtype=bool)
    hits = (y <= q).astype(int)
    strict = stress_exceedance(hits, flags)
    dq = dq_test(hits, q, alpha, lags) if hits.size > lags + 10 else None
    return MetricsSummary(
        n=int(hits.size),
        exceedance=exceedance(hits),
        strict_exceedance=strict,
        strict_count=int(flags.sum()),
        # gap is measured against the nominal 5% level
        stress_gap=None if strict is None else strict - NOMINAL,
        avg_capital=avg_capital(q),
        stressed_avg_capital=avg_capital(q[flags]) if flags.any() else None,
        tick_loss=tick_loss(y, q, alpha),
        uc=kupiec_uc(int(hits.size), int(hits.sum()), alpha),
        cc=christoffersen_cc(hits, alpha) if hits.size >= 2 else TestResult(math.nan, math.nan, 2, False, "too_short"),
        dq=dq,
    )


# distortion curves and the theory battery live in their own module
from .theory import DistortionCurve, TheoryReport, distortion_curve, run_theory_suite  # noqa: E402
