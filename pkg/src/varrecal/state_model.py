"""Composite volatility proxy, regime labels and stress flags.

Every threshold and normalizer here is computed from a training index set
and only then applied to the evaluation indices, so outputs on the
evaluation set never depend on data outside the training set.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from . import market_data as md
from .errors import BadKappa, EmptyTrainWindow, NonpositiveInput
from .garch import fit_garch

log = logging.getLogger(__name__)

PROXY_FLOOR = 1e-8
GARCH_LOOKBACK = 252

LOW, MID, HIGH = 0, 1, 2
REGIME_NAMES = ("low", "mid", "high")


def percentile(x: np.ndarray, q: float) -> float:
    """Linear-interpolation ("inclusive") percentile, q in [0, 100]."""
    return float(np.percentile(np.asarray(x, dtype=float), q, method="linear"))


def _train_values(x, train_idx) -> np.ndarray:
    vals = np.asarray(x, dtype=float)[train_idx]
    if vals.size == 0:
        raise EmptyTrainWindow("training index set is empty")
    return vals


def vix_to_daily(vix_level):
    """VIX index points to an approximate daily volatility."""
    v = np.asarray(vix_level, dtype=float)
    if np.any(~(v > 0)):
        raise NonpositiveInput("VIX level must be positive")
    out = v / md.ANNUALIZATION
    return float(out) if out.ndim == 0 else out


def garch_proxy_series(returns, ewma_vol, lookback: int = GARCH_LOOKBACK, restarts: int = 3):
    """Rolling one-step-ahead Gaussian GARCH(1,1) volatility.

    ``returns[t]`` is the return realized on bar ``t`` (NaN allowed at the
    start). The value at ``t`` is the forecast for ``t+1`` from a fit on the
    trailing ``lookback`` returns ending at ``t``. Dates without enough
    history, or whose fit fails, take ``ewma_vol[t]``. Output is floored at
    ``PROXY_FLOOR``.

    Returns ``(proxy, audit)`` with fit and fallback counts.
    """
    r = np.asarray(returns, dtype=float)
    ewma = np.asarray(ewma_vol, dtype=float)
    out = ewma.copy()
    fits = fallbacks = 0
    for t in range(r.size):
        window = r[t - lookback + 1 : t + 1] if t + 1 >= lookback else None
        if window is None or not np.all(np.isfinite(window)):
            fallbacks += 1
            continue
        fit = fit_garch(window, restarts=restarts)
        if fit is None:
            fallbacks += 1
            continue
        fits += 1
        out[t] = np.sqrt(fit.next_sigma2)
    out = np.where(np.isfinite(out), np.maximum(out, PROXY_FLOOR), out)
    return out, {"garch_fits": fits, "garch_fallbacks": fallbacks}


def prepare_panel(series: md.AssetSeries, lookback: int = GARCH_LOOKBACK) -> md.FeaturePanel:
    """Feature panel with ``garch_vol_proxy`` filled in."""
    panel = md.build_features(series)
    hist = panel.history
    proxy, audit = garch_proxy_series(hist["ret"].to_numpy(), hist["ewma_vol_20"].to_numpy(), lookback)
    by_date = dict(zip(hist["date"].to_numpy(), proxy))
    frame = panel.frame.copy()
    frame["garch_vol_proxy"] = [by_date[d] for d in frame["date"].to_numpy()]
    log.info("%s: garch proxy fits=%d fallbacks=%d", series.asset_id, audit["garch_fits"], audit["garch_fallbacks"])
    return md.FeaturePanel(panel.asset_id, frame, hist, audit)


@dataclass(frozen=True)
class VolProxySeries:
    values: np.ndarray
    medians: Tuple[float, float, float]
    components: Tuple[np.ndarray, np.ndarray, np.ndarray] = field(repr=False, default=None)


def composite_proxy(c1, c2, c3, train_idx, eval_idx) -> VolProxySeries:
    """Median-normalized average of three components, re-anchored to ``c1``."""
    comps = [np.asarray(c, dtype=float) for c in (c1, c2, c3)]
    meds = tuple(max(float(np.median(_train_values(c, train_idx))), PROXY_FLOOR) for c in comps)
    evals = tuple(c[eval_idx] for c in comps)
    v = (evals[0] / meds[0] + evals[1] / meds[1] + evals[2] / meds[2]) / 3.0 * meds[0]
    return VolProxySeries(np.maximum(v, PROXY_FLOOR), meds, evals)


def regime_thresholds(vix_daily, train_idx) -> Tuple[float, float]:
    vals = _train_values(vix_daily, train_idx)
    return percentile(vals, 50), percentile(vals, 80)


def label_regimes(values, thresholds: Tuple[float, float]) -> np.ndarray:
    med, p80 = thresholds
    values = np.asarray(values, dtype=float)
    labels = np.full(values.shape, MID, dtype=np.int8)
    labels[values < med] = LOW
    labels[values > p80] = HIGH
    return labels


def regime_labels(vix_daily, train_idx, eval_idx) -> np.ndarray:
    """low below the training median, high above the training 80th
    percentile, mid otherwise (boundaries go to mid)."""
    th = regime_thresholds(vix_daily, train_idx)
    return label_regimes(np.asarray(vix_daily, dtype=float)[eval_idx], th)


def strict_stress_thresholds(vix_daily, drawdown, train_idx) -> Tuple[float, float]:
    return percentile(_train_values(vix_daily, train_idx), 90), percentile(_train_values(drawdown, train_idx), 30)


def strict_stress_flags(vix_daily, drawdown, train_idx, eval_idx) -> np.ndarray:
    q90, q30 = strict_stress_thresholds(vix_daily, drawdown, train_idx)
    vix_e = np.asarray(vix_daily, dtype=float)[eval_idx]
    dd_e = np.asarray(drawdown, dtype=float)[eval_idx]
    return (vix_e >= q90) & (dd_e <= q30)


def selection_stress_flags(
    vix_daily,
    train_idx,
    eval_idx,
    min_count: int = 10,
    start_pct: float = 70.0,
    step: float = 5.0,
    floor_pct: float = 50.0,
) -> Tuple[np.ndarray, Dict]:
    """High-VIX flags for the selection block, relaxed until ``min_count``.

    The percentile starts at ``start_pct`` of the training values and drops
    by ``step`` while fewer than ``min_count`` evaluation dates qualify, never
    below ``floor_pct``. The audit records where it stopped.
    """
    train = _train_values(vix_daily, train_idx)
    vals = np.asarray(vix_daily, dtype=float)[eval_idx]
    pct = start_pct
    while True:
        flags = vals >= percentile(train, pct)
        count = int(flags.sum())
        if count >= min_count or pct - step < floor_pct - 1e-9:
            break
        pct -= step
    audit = {"percentile": pct, "count": count, "exhausted": count < min_count}
    return flags, audit


def apply_underreaction(values, strict_stress, kappa: float) -> np.ndarray:
    """Shrink the proxy by ``kappa`` on stressed dates."""
    if not 0.0 < kappa < 1.0:
        raise BadKappa(f"kappa must lie in (0, 1), got {kappa}")
    if isinstance(values, VolProxySeries):
        return VolProxySeries(apply_underreaction(values.values, strict_stress, kappa), values.medians, values.components)
    v = np.asarray(values, dtype=float)
    out = np.where(np.asarray(strict_stress, dtype=bool), kappa * v, v)
    return np.maximum(out, PROXY_FLOOR)
