"""Executable checks of the recalibration algebra and of the distortion
caused by a proxy that underreacts in stress.

The suite draws every random instance from one seeded generator, so a given
seed always produces the same report bytes.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy import stats

from .errors import BadDistribution
from .recalibration import contrast_ratio, lower_quantile, proxy_power
from .selection import RHO_GRID, screened_selector

QuantileFn = Callable[[np.ndarray, float], float]


def conditional_law(name: str, df: Optional[float] = None):
    """Frozen scipy distribution for a named conditional law."""
    if name in ("gaussian", "normal"):
        return stats.norm()
    if name in ("t", "student_t"):
        if df is None or df <= 0:
            raise BadDistribution("student_t needs a positive df")
        return stats.t(df)
    raise BadDistribution(f"unsupported conditional law {name!r}")


def _check_law(dist):
    name = getattr(getattr(dist, "dist", None), "name", None)
    if name not in ("norm", "t"):
        raise BadDistribution("distortion curves need a Gaussian or Student-t law")
    return dist


@dataclass(frozen=True)
class DistortionCurve:
    rho: np.ndarray
    delta: np.ndarray
    se: np.ndarray
    kappa: float
    a: float
    lower: np.ndarray
    upper: np.ndarray
    mc_delta: Optional[np.ndarray] = None

    def rows(self):
        for i, r in enumerate(self.rho):
            yield float(r), float(self.delta[i]), float(self.se[i]), float(self.lower[i]), float(self.upper[i])


def _density_extrema(dist, lo: float, hi: float):
    """Min and max of a symmetric unimodal density (mode 0) on [lo, hi]."""
    f_lo, f_hi = dist.pdf(lo), dist.pdf(hi)
    f_min = min(f_lo, f_hi)
    f_max = dist.pdf(0.0) if lo <= 0.0 <= hi else max(f_lo, f_hi)
    return float(f_min), float(f_max)


def distortion_curve(dist, a: float, kappa: float, rho_grid: Sequence[float] = RHO_GRID, alpha: float = 0.05,
                     draws: int = 0, seed: Optional[int] = None) -> DistortionCurve:
    """Excess conditional breach probability when the test proxy is shrunk by
    ``kappa`` and the adjustment magnitude ``a`` is matched across rho.

    ``delta(rho) = F(q* + a (1 - kappa**rho)) - F(q*)`` analytically. With
    ``draws > 0`` a Monte Carlo estimate from common random numbers is added,
    and ``se`` holds its binomial standard errors; otherwise ``se`` is the
    analytic curve's zero error.
    """
    dist = _check_law(dist)
    if not a > 0:
        raise ValueError("adjustment magnitude must be positive")
    if not 0.0 < kappa < 1.0:
        raise ValueError("kappa must lie in (0, 1)")
    rho = np.asarray(rho_grid, dtype=float)
    q_star = float(dist.ppf(alpha))
    slack = a * (1.0 - proxy_power(kappa, rho))
    delta = dist.cdf(q_star + slack) - dist.cdf(q_star)
    lower = np.empty_like(rho)
    upper = np.empty_like(rho)
    for i, s in enumerate(slack):
        f_min, f_max = _density_extrema(dist, q_star, q_star + s)
        lower[i], upper[i] = f_min * s, f_max * s
    se = np.zeros_like(rho)
    mc = None
    if draws > 0:
        rng = np.random.default_rng(seed)
        y = np.sort(dist.rvs(size=draws, random_state=rng))
        p = np.searchsorted(y, q_star + slack, side="right") / draws
        p0 = np.searchsorted(y, q_star, side="right") / draws
        mc = p - p0
        se = np.sqrt(np.maximum(p * (1 - p), 1.0 / draws) / draws)
        se[rho == 0] = 0.0
    return DistortionCurve(rho, delta, se, float(kappa), float(a), lower, upper, mc)


# --- suite ------------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


@dataclass
class TheoryReport:
    seed: int
    checks: List[CheckResult] = field(default_factory=list)
    curves: List[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(all(c.passed for c in self.checks))

    def to_json(self, timings: bool = False) -> str:
        checks = []
        for c in self.checks:
            d = asdict(c)
            d["passed"] = bool(d["passed"])
            if not timings:
                d.pop("seconds")
            checks.append(d)
        return json.dumps({"seed": self.seed, "passed": self.passed, "checks": checks, "curves": self.curves},
                          indent=2, sort_keys=True)

    def table(self) -> str:
        width = max(len(c.name) for c in self.checks)
        lines = [f"{'check'.ljust(width)}  result  detail"]
        for c in self.checks:
            lines.append(f"{c.name.ljust(width)}  {'PASS' if c.passed else 'FAIL'}    {c.detail}")
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines) + "\n"


def _forecast(y, q, v, v_t, q_t, rho, alpha, quantile: QuantileFn, d_cal=None, d_t=1.0):
    """Calibrate with ``quantile`` and forecast one step, with optional
    multiplicative distortion of the calibration and test proxies."""
    vc = v if d_cal is None else v * d_cal
    c = quantile((y - q) / proxy_power(vc, rho), alpha)
    return q_t + c * proxy_power(v_t * d_t, rho)


def _instance(rng, n=None):
    n = int(rng.integers(20, 300)) if n is None else n
    vol = np.exp(rng.normal(np.log(0.01), 0.5, n))
    y = rng.standard_normal(n) * vol
    q = -1.645 * vol * np.exp(rng.normal(0, 0.3, n))
    v = vol * np.exp(rng.normal(0, 0.3, n))
    return y, q, v, float(rng.normal(-0.02, 0.005)), float(np.exp(rng.normal(np.log(0.01), 0.5)))


def check_rescaling(rng, quantile: QuantileFn, alpha=0.05, instances=100, etas=(0.1, 1.0, 10.0)) -> CheckResult:
    worst = 0.0
    for _ in range(instances):
        y, q, v, q_t, v_t = _instance(rng)
        for rho in RHO_GRID:
            ref = _forecast(y, q, v, v_t, q_t, rho, alpha, quantile)
            for eta in etas:
                worst = max(worst, abs(_forecast(y, q, eta * v, eta * v_t, q_t, rho, alpha, quantile) - ref))
    return CheckResult("rescaling_invariance", worst <= 1e-10, f"max |change| = {worst:.3e} over {instances} instances")


def check_elasticity(rng, instances=100) -> CheckResult:
    worst = 0.0
    for _ in range(instances):
        v = float(np.exp(rng.normal(-4, 1)))
        c = float(rng.normal(-1, 0.3)) or -1.0
        eta = float(np.exp(rng.normal(0, 1)))
        for rho in RHO_GRID:
            lhs = math.log(abs(c * proxy_power(eta * v, rho))) - math.log(abs(c * proxy_power(v, rho)))
            worst = max(worst, abs(lhs - rho * math.log(eta)))
    return CheckResult("adjustment_elasticity", worst <= 1e-10, f"max |log-ratio - rho log eta| = {worst:.3e}")


def check_contrast(rng, pairs=100) -> CheckResult:
    ok = True
    for _ in range(pairs):
        v_l = float(np.exp(rng.normal(-4.5, 0.5)))
        v_h = v_l * float(np.exp(rng.uniform(0.01, 2.0)))
        vals = np.array([contrast_ratio(v_h, v_l, r) for r in RHO_GRID])
        ok &= vals[0] == 1.0 and vals[-1] == v_h / v_l and bool(np.all(np.diff(vals) > 0))
    return CheckResult("contrast_monotone", bool(ok), f"{pairs} pairs, endpoints exact, strictly increasing")


def check_distortion_sign(rng, instances=200) -> CheckResult:
    ok = True
    for _ in range(instances):
        q_t = float(rng.normal(-0.02, 0.005))
        c = -float(np.exp(rng.normal(0, 1)))
        v = float(np.exp(rng.normal(-4, 0.5)))
        kappa = float(rng.uniform(0.05, 0.95))
        for rho in RHO_GRID:
            clean = q_t + c * proxy_power(v, rho)
            shrunk = q_t + c * proxy_power(kappa * v, rho)
            ok &= (shrunk == clean) if rho == 0 else (shrunk > clean)
    return CheckResult("distortion_sign", bool(ok), f"{instances} instances, strict for rho > 0, equal at 0")


def check_distortion_curves(alpha=0.05) -> tuple:
    curves = []
    ok = True
    notes = []
    for law, dist in (("gaussian", conditional_law("gaussian")), ("student_t5", conditional_law("t", 5))):
        for a in (0.25, 0.5, 1.0):
            for kappa in (0.2, 0.4, 0.8):
                cur = distortion_curve(dist, a, kappa, RHO_GRID, alpha)
                zero = cur.delta[0] == 0.0
                mono = bool(np.all(np.diff(cur.delta) >= 0))
                sandwich = bool(np.all(cur.lower <= cur.delta) and np.all(cur.delta <= cur.upper))
                if not (zero and mono and sandwich):
                    ok = False
                    notes.append(f"{law} a={a} kappa={kappa}")
                for r, d, se, lo, hi in cur.rows():
                    curves.append({"law": law, "a": a, "kappa": kappa, "rho": r, "delta": d, "se": se, "lower": lo, "upper": hi})
    detail = "18 curves: zero at rho=0, nondecreasing, bounds hold" if ok else "failed: " + "; ".join(notes)
    return CheckResult("distortion_curves", ok, detail), curves


def check_distortion_anchor(alpha=0.05) -> CheckResult:
    cur = distortion_curve(conditional_law("gaussian"), 0.5, 0.4, (0.0, 1.0), alpha)
    # independent route: complementary error function instead of scipy's cdf
    ref = 0.5 * math.erfc(-(float(stats.norm.ppf(alpha)) + 0.3) / math.sqrt(2.0)) - alpha
    d = float(cur.delta[-1])
    return CheckResult("distortion_anchor", bool(abs(d - ref) <= 1e-12),
                       f"gaussian a=0.5 kappa=0.4 rho=1: delta = {d:.7f}")


def check_distortion_monte_carlo(seed: int, alpha=0.05, draws=200_000) -> CheckResult:
    cur = distortion_curve(conditional_law("gaussian"), 0.5, 0.4, RHO_GRID, alpha, draws=draws, seed=seed)
    z = np.abs(cur.mc_delta - cur.delta)[1:] / cur.se[1:]
    ok = bool(cur.mc_delta[0] == 0.0 and np.all(cur.se[1:] > 0) and z.max() < 4.0)
    return CheckResult("distortion_monte_carlo", ok, f"{draws} draws, max |z| = {z.max():.2f}")


def check_heterogeneous(rng, quantile: QuantileFn, alpha=0.05, instances=1000) -> CheckResult:
    done = up = down = 0
    ok = True
    while done < instances:
        y, q, v, q_t, v_t = _instance(rng)
        rho = float(rng.choice(RHO_GRID))
        if quantile((y - q) / proxy_power(v, rho), alpha) >= 0:
            continue  # the ordering is stated for c < 0
        d = np.exp(rng.normal(0, 0.4, y.size))
        clean = _forecast(y, q, v, v_t, q_t, rho, alpha, quantile)
        if done % 2 == 0:
            d_t = float(d.min() * rng.uniform(0.2, 0.999))
            ok &= _forecast(y, q, v, v_t, q_t, rho, alpha, quantile, d, d_t) >= clean
            up += 1
        else:
            d_t = float(d.max() / rng.uniform(0.2, 0.999))
            ok &= _forecast(y, q, v, v_t, q_t, rho, alpha, quantile, d, d_t) <= clean
            down += 1
        done += 1
    return CheckResult("heterogeneous_ordering", bool(ok), f"{up} shrink-at-test and {down} inflate-at-test instances")


def _monotone_curve(rng, grid):
    inc = np.cumsum(rng.exponential(1.0, grid.size) * (rng.random(grid.size) < 0.7))
    inc -= inc[0]
    return inc / max(inc[-1], 1e-12) * rng.uniform(0.01, 0.2)


def check_screened_selector(rng, curves=500, taus=10) -> CheckResult:
    grid = np.asarray(RHO_GRID)
    mono = prefix = True
    both = {True: 0, False: 0}
    for _ in range(curves):
        delta = _monotone_curve(rng, grid)
        capital = 0.05 - _monotone_curve(rng, grid) * 0.1
        tau_grid = np.sort(rng.uniform(-0.01, delta.max() + 0.01, taus))
        last = -np.inf
        for tau in tau_grid:
            rho_hat, feas = screened_selector(grid, delta, capital, tau)
            both[rho_hat is not None] += 1
            k = int(feas.sum())
            prefix &= bool(np.all(feas[:k]) and not feas[k:].any())
            if rho_hat is not None:
                mono &= rho_hat >= last
                last = rho_hat
    detail = f"{curves} curve pairs x {taus} tolerances; feasible {both[True]}, empty {both[False]}"
    return CheckResult("screened_selector_monotone", bool(mono and prefix), detail)


def run_theory_suite(seed: int = 0, quantile: QuantileFn = lower_quantile, alpha: float = 0.05) -> TheoryReport:
    """Run every battery and collect a pass/fail report.

    ``quantile`` is injectable so that a deliberately broken order statistic
    can be shown to make the suite fail.
    """
    rng = np.random.default_rng(seed)
    report = TheoryReport(seed)

    def timed(fn, *args):
        t0 = time.perf_counter()
        out = fn(*args)
        res = out[0] if isinstance(out, tuple) else out
        res.seconds = time.perf_counter() - t0
        report.checks.append(res)
        return out

    timed(check_rescaling, rng, quantile, alpha)
    timed(check_elasticity, rng)
    timed(check_contrast, rng)
    timed(check_distortion_sign, rng)
    _, curves = timed(check_distortion_curves, alpha)
    report.curves = curves
    timed(check_distortion_anchor, alpha)
    timed(check_distortion_monte_carlo, seed, alpha)
    timed(check_heterogeneous, rng, quantile, alpha)
    timed(check_screened_selector, rng)
    return report
