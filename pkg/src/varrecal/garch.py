"""GARCH(1,1) / GJR-GARCH(1,1) maximum likelihood with Gaussian or
unit-variance Student-t innovations.

Parameters are optimized on an unconstrained scale by Nelder-Mead:

* ``mu = mean + sd * x0``
* ``omega = exp(x1)``
* persistence ``p = 0.999 * sigmoid(x2)`` split across alpha, gamma/2 and
  beta by a softmax, so alpha, gamma, beta >= 0 and
  ``alpha + gamma/2 + beta < 0.999``
* ``nu = 2.05 + 497.95 * sigmoid(x_last)`` for Student-t.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

MAX_PERSISTENCE = 0.999
NU_LO, NU_SPAN = 2.05, 497.95
MAXITER = 2000


@dataclass(frozen=True)
class GarchParams:
    mu: float
    omega: float
    alpha: float
    beta: float
    gamma: float = 0.0
    nu: Optional[float] = None  # None -> Gaussian

    @property
    def persistence(self) -> float:
        return self.alpha + 0.5 * self.gamma + self.beta


@dataclass(frozen=True)
class GarchFit:
    params: GarchParams
    loglik: float
    converged: bool
    last_eps: float
    last_sigma2: float
    next_sigma2: float
    nit: int = 0


@njit(cache=True)
def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


@njit(cache=True)
def _unpack(x, mean, sd, asym, student):
    mu = mean + sd * x[0]
    omega = math.exp(x[1])
    p = MAX_PERSISTENCE * _sigmoid(x[2])
    if asym:
        e0 = math.exp(x[3])
        e1 = math.exp(x[4])
        tot = e0 + e1 + 1.0
        alpha = p * e0 / tot
        gamma = 2.0 * p * e1 / tot
        beta = p / tot
        k = 5
    else:
        alpha = p * _sigmoid(x[3])
        gamma = 0.0
        beta = p - alpha
        k = 4
    nu = 0.0
    if student:
        nu = NU_LO + NU_SPAN * _sigmoid(x[k])
    return mu, omega, alpha, gamma, beta, nu


@njit(cache=True)
def _neg_loglik(x, r, mean, sd, asym, student):
    mu, omega, alpha, gamma, beta, nu = _unpack(x, mean, sd, asym, student)
    n = r.shape[0]
    s2 = 0.0
    for i in range(n):
        s2 += (r[i] - mu) ** 2
    s2 /= n
    if student:
        const = math.lgamma(0.5 * (nu + 1.0)) - math.lgamma(0.5 * nu) - 0.5 * math.log(math.pi * (nu - 2.0))
    else:
        const = -0.5 * math.log(2.0 * math.pi)
    ll = 0.0
    for i in range(n):
        e = r[i] - mu
        if not (s2 > 0.0) or not math.isfinite(s2):
            return 1e300
        if student:
            ll += const - 0.5 * math.log(s2) - 0.5 * (nu + 1.0) * math.log(1.0 + e * e / (s2 * (nu - 2.0)))
        else:
            ll += const - 0.5 * math.log(s2) - 0.5 * e * e / s2
        lev = gamma if e < 0.0 else 0.0
        s2 = omega + (alpha + lev) * e * e + beta * s2
    if not math.isfinite(ll):
        return 1e300
    return -ll


@njit(cache=True)
def _simplex(sim0, r, mean, sd, asym, student, maxiter, xatol, fatol):
    """Nelder-Mead on ``_neg_loglik`` from the given starting simplex.

    The iteration, coefficients and stopping rule of scipy's
    ``method="Nelder-Mead"`` without a function-call cap, compiled so a
    rolling proxy can afford thousands of fits. Vertices with exactly equal
    values are ordered stably, which keeps paths machine independent (numpy's
    own argsort may not be). Returns (x, f, iterations, converged).
    """
    sim = sim0.copy()
    m = sim.shape[0]
    n = sim.shape[1]
    fsim = np.empty(m)
    for k in range(m):
        fsim[k] = _neg_loglik(sim[k], r, mean, sd, asym, student)
    ind = np.argsort(fsim, kind="mergesort")
    sim = sim[ind]
    fsim = fsim[ind]
    it = 1
    while it < maxiter:
        if np.max(np.abs(sim[1:] - sim[0])) <= xatol and np.max(np.abs(fsim[0] - fsim[1:])) <= fatol:
            break
        xbar = sim[0].copy()
        for j in range(1, m - 1):
            xbar += sim[j]
        xbar /= n
        xr = 2.0 * xbar - sim[-1]
        fxr = _neg_loglik(xr, r, mean, sd, asym, student)
        if fxr < fsim[0]:
            xe = 3.0 * xbar - 2.0 * sim[-1]
            fxe = _neg_loglik(xe, r, mean, sd, asym, student)
            if fxe < fxr:
                sim[-1] = xe
                fsim[-1] = fxe
            else:
                sim[-1] = xr
                fsim[-1] = fxr
        elif fxr < fsim[-2]:
            sim[-1] = xr
            fsim[-1] = fxr
        else:
            shrink = False
            if fxr < fsim[-1]:
                xc = 1.5 * xbar - 0.5 * sim[-1]
                fxc = _neg_loglik(xc, r, mean, sd, asym, student)
                if fxc <= fxr:
                    sim[-1] = xc
                    fsim[-1] = fxc
                else:
                    shrink = True
            else:
                xcc = 0.5 * xbar + 0.5 * sim[-1]
                fxcc = _neg_loglik(xcc, r, mean, sd, asym, student)
                if fxcc < fsim[-1]:
                    sim[-1] = xcc
                    fsim[-1] = fxcc
                else:
                    shrink = True
            if shrink:
                for j in range(1, m):
                    sim[j] = sim[0] + 0.5 * (sim[j] - sim[0])
                    fsim[j] = _neg_loglik(sim[j], r, mean, sd, asym, student)
        it += 1
        ind = np.argsort(fsim, kind="mergesort")
        sim = sim[ind]
        fsim = fsim[ind]
    return sim[0].copy(), fsim[0], it, it < maxiter


def conditional_variance(returns: np.ndarray, params: GarchParams) -> np.ndarray:
    """Filtered variances; element ``i`` is the variance of ``returns[i]`` and
    the final extra element is the one-step-ahead forecast."""
    r = np.asarray(returns, dtype=float)
    e = r - params.mu
    out = np.empty(r.size + 1)
    out[0] = np.mean(e**2)
    for i in range(r.size):
        lev = params.gamma if e[i] < 0 else 0.0
        out[i + 1] = params.omega + (params.alpha + lev) * e[i] ** 2 + params.beta * out[i]
    return out


def variance_path(fit: GarchFit, horizon: int) -> np.ndarray:
    """Multi-step variance forecasts for h = 1..horizon.

    The one-step value uses the last observed shock; later steps replace
    squared shocks (and the leverage indicator) by their expectations.
    """
    p = fit.params
    path = np.empty(horizon)
    if horizon == 0:
        return path
    path[0] = fit.next_sigma2
    grow = p.alpha + 0.5 * p.gamma + p.beta
    for h in range(1, horizon):
        path[h] = p.omega + grow * path[h - 1]
    return path


def _starts(asym: bool, student: bool):
    # (persistence, share of persistence on shocks)
    for pers, share in ((0.95, 0.08), (0.85, 0.2), (0.6, 0.4)):
        a = math.log(pers / (MAX_PERSISTENCE - pers))
        if asym:
            # alpha : gamma/2 : beta
            al, ga, be = share * 0.6, share * 0.4, 1.0 - share
            x = [0.0, 0.0, a, math.log(al / be), math.log(ga / be)]
        else:
            x = [0.0, 0.0, a, math.log(share / (1.0 - share))]
        if student:
            nu = 8.0
            x.append(math.log((nu - NU_LO) / (NU_LO + NU_SPAN - nu)))
        yield pers, np.array(x)


def fit_garch(
    returns: np.ndarray,
    student: bool = False,
    asymmetric: bool = False,
    restarts: int = 3,
    maxiter: int = MAXITER,
) -> Optional[GarchFit]:
    """Fit a constant-mean (GJR-)GARCH(1,1); ``None`` on failure.

    Failure means a degenerate sample, a non-finite likelihood, or no
    restart converging within ``maxiter`` iterations.
    """
    r = np.ascontiguousarray(returns, dtype=float)
    if r.size < 10 or not np.all(np.isfinite(r)):
        return None
    mean = float(r.mean())
    sd = float(r.std())
    if not sd > 1e-12:
        return None
    best = None
    for pers, x0 in list(_starts(asymmetric, student))[:restarts]:
        x0 = x0.copy()
        x0[1] = math.log(sd * sd * (1.0 - pers))
        steps = np.full(x0.size, 0.5)
        steps[0] = 0.1
        simplex = np.vstack([x0] + [x0 + np.eye(x0.size)[i] * steps[i] for i in range(x0.size)])
        x, fun, nit, ok = _simplex(simplex, r, mean, sd, asymmetric, student, maxiter, 1e-7, 1e-9)
        if not ok or not np.isfinite(fun) or fun >= 1e299:
            continue
        if best is None or fun < best[1]:
            best = (x, fun, nit)
    if best is None:
        return None
    mu, omega, alpha, gamma, beta, nu = _unpack(best[0], mean, sd, asymmetric, student)
    params = GarchParams(mu, omega, alpha, beta, gamma, nu if student else None)
    s2 = conditional_variance(r, params)
    if not np.all(np.isfinite(s2)) or s2[-1] <= 0:
        return None
    return GarchFit(params, -float(best[1]), True, float(r[-1] - mu), float(s2[-2]), float(s2[-1]), int(best[2]))


def simulate_garch(params: GarchParams, n: int, rng: np.random.Generator, burn: int = 500) -> np.ndarray:
    """Simulate returns from the model (used by recovery tests)."""
    total = n + burn
    if params.nu is None:
        z = rng.standard_normal(total)
    else:
        z = rng.standard_t(params.nu, total) * math.sqrt((params.nu - 2.0) / params.nu)
    s2 = params.omega / max(1e-12, 1.0 - params.persistence)
    out = np.empty(total)
    for i in range(total):
        e = math.sqrt(s2) * z[i]
        out[i] = params.mu + e
        lev = params.gamma if e < 0 else 0.0
        s2 = params.omega + (params.alpha + lev) * e * e + params.beta * s2
    return out[burn:]
