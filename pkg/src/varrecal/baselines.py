"""Baseline lower alpha-quantile forecasters.

Each forecaster is fitted on a training block only and returns a
``BaselineForecast`` covering the requested evaluation span. Parametric
fits that fail fall back to historical simulation and say so in
``diagnostics``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from numba import njit
from scipy.optimize import brentq, linprog, minimize
from scipy.special import stdtr
from scipy.stats import norm

from .errors import EmptyTrain
from .garch import GarchParams, fit_garch, variance_path
from .recalibration import lower_quantile
from .state_model import PROXY_FLOOR

METHODS = ("HS", "FHS", "QR", "GPQ", "GARCH_T", "GJR_GARCH_T", "AS_CAVIAR")
QR_PENALTY = 1e-4


@dataclass
class BaselineForecast:
    method: str
    q: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def fallback(self) -> bool:
        return bool(self.diagnostics.get("fallback", False))


def _check_train(train) -> np.ndarray:
    x = np.asarray(train, dtype=float)
    if x.size == 0:
        raise EmptyTrain("training block is empty")
    return x


def hs_quantile(train_returns, alpha: float) -> float:
    return lower_quantile(_check_train(train_returns), alpha)


def hs_forecast(train_returns, alpha: float, horizon: int = 1) -> BaselineForecast:
    """Empirical lower alpha-quantile of the training returns, held constant."""
    q = hs_quantile(train_returns, alpha)
    return BaselineForecast("HS", np.full(horizon, q), {"converged": True, "fallback": False})


def _hs_fallback(method: str, train_returns, alpha: float, horizon: int, **diag) -> BaselineForecast:
    fc = hs_forecast(train_returns, alpha, horizon)
    return BaselineForecast(method, fc.q, {"converged": False, "fallback": True, **diag})


def filtered_quantile(train_returns, train_vol, vol_path, alpha: float, method: str) -> BaselineForecast:
    r = _check_train(train_returns)
    s = np.maximum(np.asarray(train_vol, dtype=float), PROXY_FLOOR)
    mean = float(r.mean())
    z = lower_quantile((r - mean) / s, alpha)
    path = np.maximum(np.asarray(vol_path, dtype=float), PROXY_FLOOR)
    return BaselineForecast(method, mean + z * path, {"converged": True, "fallback": False, "z": z, "mean": mean})


def fhs_forecast(train_returns, train_ewma_vol, current_ewma_vol_path, alpha: float) -> BaselineForecast:
    """Filtered historical simulation: standardized-residual quantile rescaled by EWMA vol."""
    return filtered_quantile(train_returns, train_ewma_vol, current_ewma_vol_path, alpha, "FHS")


def gpq_forecast(train_returns, train_garch_proxy, eval_proxy_path, alpha: float) -> BaselineForecast:
    """Same construction as FHS with the GARCH-style proxy as the scale."""
    return filtered_quantile(train_returns, train_garch_proxy, eval_proxy_path, alpha, "GPQ")


# --- quantile regression ---------------------------------------------------


def _pinball_lp(X: np.ndarray, y: np.ndarray, alpha: float, penalty: float):
    """Solve min mean pinball(y - Xb - b0) + penalty * |b|_1 as an LP."""
    n, p = X.shape
    ones = np.ones((n, 1))
    A = sp.hstack(
        [sp.csr_matrix(X), sp.csr_matrix(-X), sp.csr_matrix(ones), sp.csr_matrix(-ones), sp.eye(n), -sp.eye(n)],
        format="csc",
    )
    cost = np.concatenate([np.full(2 * p, penalty), [0.0, 0.0], np.full(n, alpha / n), np.full(n, (1 - alpha) / n)])
    res = linprog(
        cost,
        A_eq=A,
        b_eq=y,
        bounds=(0, None),
        method="highs-ds",
        options={"primal_feasibility_tolerance": 1e-9, "dual_feasibility_tolerance": 1e-9},
    )
    if res.status != 0:
        return None
    x = res.x
    return x[:p] - x[p : 2 * p], x[2 * p] - x[2 * p + 1]


def qr_forecast(train_features, train_targets, eval_features, alpha: float, penalty: float = QR_PENALTY) -> BaselineForecast:
    """L1-penalized linear quantile regression on standardized features.

    Columns that are constant on the training block are dropped. A solver
    failure falls back to historical simulation on the targets.
    """
    X = np.asarray(train_features, dtype=float)
    y = _check_train(train_targets)
    E = np.atleast_2d(np.asarray(eval_features, dtype=float))
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    keep = sd > 1e-12
    dropped = [int(i) for i in np.flatnonzero(~keep)]
    Xs = (X[:, keep] - mu[keep]) / sd[keep]
    Es = (E[:, keep] - mu[keep]) / sd[keep]
    if Xs.shape[1] == 0:
        # intercept-only model
        Xs, Es = np.zeros((y.size, 1)), np.zeros((E.shape[0], 1))
    sol = _pinball_lp(Xs, y, alpha, penalty)
    if sol is None:
        return _hs_fallback("QR", y, alpha, E.shape[0], dropped_columns=dropped)
    beta, b0 = sol
    diag = {"converged": True, "fallback": False, "dropped_columns": dropped, "intercept": float(b0)}
    return BaselineForecast("QR", Es @ beta + b0, diag)


# --- GARCH family ----------------------------------------------------------


def std_t_quantile(alpha: float, nu: Optional[float]) -> float:
    """alpha-quantile of a unit-variance Student-t (Gaussian when nu is None)."""
    if nu is None or not math.isfinite(nu):
        return float(norm.ppf(alpha))
    # root of the CDF: scipy's direct inverse drifts by ~1e-11 for some nu
    x = brentq(lambda z: stdtr(nu, z) - alpha, -1e3, 1e3, xtol=1e-14, maxiter=500)
    return float(x * math.sqrt((nu - 2.0) / nu))


def garch_quantile_path(params: GarchParams, sigma2_path, alpha: float) -> np.ndarray:
    return params.mu + np.sqrt(np.asarray(sigma2_path, dtype=float)) * std_t_quantile(alpha, params.nu)


def _garch_family(method: str, train_returns, horizon: int, alpha: float, asymmetric: bool) -> BaselineForecast:
    r = _check_train(train_returns)
    fit = fit_garch(r, student=True, asymmetric=asymmetric)
    if fit is None:
        return _hs_fallback(method, r, alpha, horizon)
    path = variance_path(fit, horizon)
    q = garch_quantile_path(fit.params, path, alpha)
    if not np.all(np.isfinite(q)):
        return _hs_fallback(method, r, alpha, horizon)
    p = fit.params
    diag = {
        "converged": True,
        "fallback": False,
        "loglik": fit.loglik,
        "params": {"mu": p.mu, "omega": p.omega, "alpha": p.alpha, "gamma": p.gamma, "beta": p.beta, "nu": p.nu},
    }
    return BaselineForecast(method, q, diag)


def garch_t_forecast(train_returns, horizon: int, alpha: float) -> BaselineForecast:
    """GARCH(1,1)-t quantile path over ``horizon`` steps past the training block."""
    return _garch_family("GARCH_T", train_returns, horizon, alpha, asymmetric=False)


def gjr_garch_t_forecast(train_returns, horizon: int, alpha: float) -> BaselineForecast:
    return _garch_family("GJR_GARCH_T", train_returns, horizon, alpha, asymmetric=True)


# --- asymmetric-slope CAViaR ------------------------------------------------

CAVIAR_BOUNDS = ((-1.0, 1.0), (0.0, 0.999), (-1.0, 1.0), (-1.0, 1.0))


@njit(cache=True)
def caviar_path(beta, returns, q0):
    """q[0] = q0; q[t] = b1 + b2 q[t-1] + b3 max(r[t-1],0) + b4 min(r[t-1],0)."""
    n = returns.shape[0]
    q = np.empty(n)
    q[0] = q0
    for t in range(1, n):
        r = returns[t - 1]
        q[t] = beta[0] + beta[1] * q[t - 1] + beta[2] * max(r, 0.0) + beta[3] * min(r, 0.0)
    return q


@njit(cache=True)
def _caviar_loss(beta, returns, q0, alpha):
    q = caviar_path(beta, returns, q0)
    tot = 0.0
    for t in range(returns.shape[0]):
        d = returns[t] - q[t]
        tot += (alpha - (1.0 if d < 0 else 0.0)) * d
    tot /= returns.shape[0]
    if not math.isfinite(tot):
        return 1e300
    return tot


def pinball_mean(y, q, alpha: float) -> float:
    d = np.asarray(y, dtype=float) - np.asarray(q, dtype=float)
    return float(np.mean((alpha - (d < 0)) * d))


def fit_caviar(train_returns, alpha: float, n_starts: int = 20, seed: int = 0):
    """Bounded multi-start pinball minimization; returns ``(beta, q0, loss)``."""
    r = np.ascontiguousarray(_check_train(train_returns))
    q0 = lower_quantile(r, alpha)
    rng = np.random.default_rng(seed)
    starts = [np.array([q0, 0.0, 0.0, 0.0])]  # the constant (HS) solution
    for _ in range(n_starts - 1):
        b2 = rng.uniform(0.0, 0.999)
        starts.append(
            np.array([np.clip(q0 * (1 - b2) + rng.normal(0, 0.005), -1, 1), b2, rng.uniform(-1, 1), rng.uniform(-1, 1)])
        )
    best_beta, best_loss = starts[0], _caviar_loss(starts[0], r, q0, alpha)
    for x0 in starts:
        res = minimize(
            _caviar_loss,
            x0,
            args=(r, q0, alpha),
            method="Nelder-Mead",
            bounds=CAVIAR_BOUNDS,
            options={"maxiter": 2000, "xatol": 1e-8, "fatol": 1e-12},
        )
        if np.isfinite(res.fun) and res.fun < best_loss:
            best_beta, best_loss = res.x, float(res.fun)
    return np.asarray(best_beta), q0, float(best_loss)


def as_caviar_forecast(train_returns, span_returns, alpha: float, n_starts: int = 20, seed: int = 0) -> BaselineForecast:
    """AS-CAViaR fitted on the training block, carried through the span.

    ``span_returns[j]`` is the return realized at span step ``j``; the
    forecast for step ``j`` only reads ``span_returns[:j]``. The path has
    ``len(span_returns) + 1`` steps, the last one forecasting the return
    after the final realized value.
    """
    r = np.asarray(train_returns, dtype=float)
    beta, q0, loss = fit_caviar(r, alpha, n_starts, seed)
    span = np.asarray(span_returns, dtype=float)
    # the trailing placeholder only sits where the recursion never looks
    full = np.concatenate([r, span, [0.0]])
    q = caviar_path(beta, full, q0)[r.size :]
    diag = {"converged": True, "fallback": False, "in_sample_pinball": loss, "beta": [float(b) for b in beta]}
    return BaselineForecast("AS_CAVIAR", q, diag)
