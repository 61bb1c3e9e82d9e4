"""Reproducible regime-switching synthetic OHLCV + VIX panels.

Volatility follows a Markov chain shared by all assets (a common market
state) with per-asset scale multipliers. Innovations are unit-variance
Student-t, or Gaussian when ``df`` is ``None``. The VIX level is built from
the conditional expected next-day market volatility so that inverting it
recovers that forward volatility exactly when bias and noise are zero.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from .errors import BadConfig
from .market_data import ANNUALIZATION, AssetSeries


@dataclass(frozen=True)
class SynthConfig:
    n_assets: int = 6
    length: int = 2700
    regime_vols: Sequence[float] = (0.007, 0.012, 0.026)
    regime_drifts: Sequence[float] = (0.0006, 0.0, -0.0025)
    transition: Sequence[Sequence[float]] = (
        (0.985, 0.015, 0.0),
        (0.02, 0.965, 0.015),
        (0.0, 0.05, 0.95),
    )
    df: Optional[float] = 5.0
    asset_scales: Optional[Sequence[float]] = None
    vix_bias: float = 0.1
    vix_noise: float = 1.0
    base_volume: float = 1e6
    volume_vol_beta: float = 0.5
    volume_noise: float = 0.3
    start_price: float = 100.0
    start_date: str = "2015-01-02"

    def validate(self) -> None:
        k = len(self.regime_vols)
        if self.n_assets < 1 or self.length < 2:
            raise BadConfig("n_assets >= 1 and length >= 2 required")
        if k < 1 or any(v <= 0 for v in self.regime_vols):
            raise BadConfig("regime volatilities must be positive")
        if len(self.regime_drifts) != k:
            raise BadConfig("one drift per regime required")
        P = np.asarray(self.transition, dtype=float)
        if P.shape != (k, k) or (P < 0).any() or not np.allclose(P.sum(axis=1), 1.0, atol=1e-12):
            raise BadConfig("transition matrix must be square, nonnegative, rows summing to 1")
        if self.df is not None and self.df <= 2:
            raise BadConfig("df must exceed 2 for unit-variance innovations")
        if self.asset_scales is not None:
            if len(self.asset_scales) != self.n_assets or any(s <= 0 for s in self.asset_scales):
                raise BadConfig("asset_scales needs one positive scale per asset")
        if self.vix_noise < 0 or self.volume_noise < 0:
            raise BadConfig("noise scales must be nonnegative")

    @classmethod
    def single_regime(cls, vol: float, length: int, n_assets: int = 1, df: Optional[float] = None, **kw):
        return cls(
            n_assets=n_assets,
            length=length,
            regime_vols=(vol,),
            regime_drifts=(0.0,),
            transition=((1.0,),),
            df=df,
            **kw,
        )


@dataclass(frozen=True)
class SynthPanel:
    series: List[AssetSeries]
    vix: pd.DataFrame
    forward_vol: np.ndarray
    states: np.ndarray


def _asset_scales(cfg: SynthConfig) -> np.ndarray:
    if cfg.asset_scales is not None:
        return np.asarray(cfg.asset_scales, dtype=float)
    if cfg.n_assets == 1:
        return np.ones(1)
    return np.linspace(0.8, 1.3, cfg.n_assets)


def _innovations(rng: np.random.Generator, df: Optional[float], size) -> np.ndarray:
    if df is None:
        return rng.standard_normal(size)
    return rng.standard_t(df, size) * np.sqrt((df - 2.0) / df)


def synth_generate(config: SynthConfig, seed: int) -> SynthPanel:
    """Generate ``config.n_assets`` bar series plus a shared VIX path."""
    config.validate()
    rng = np.random.default_rng(seed)
    n, k = config.length, len(config.regime_vols)
    P = np.asarray(config.transition, dtype=float)
    vols = np.asarray(config.regime_vols, dtype=float)
    drifts = np.asarray(config.regime_drifts, dtype=float)

    # stationary start when the chain has one, else state 0
    states = np.empty(n, dtype=int)
    w, vecs = np.linalg.eig(P.T)
    pi = np.real(vecs[:, np.argmin(np.abs(w - 1.0))])
    pi = np.abs(pi) / np.abs(pi).sum()
    states[0] = rng.choice(k, p=pi)
    u = rng.random(n)
    cum = np.cumsum(P, axis=1)
    for t in range(1, n):
        states[t] = min(int(np.searchsorted(cum[states[t - 1]], u[t], side="right")), k - 1)

    # E[sigma_{t+1} | state_t], the market volatility expected for the next return
    forward_vol = (P @ vols)[states]
    vix = ANNUALIZATION * forward_vol * (1.0 + config.vix_bias)
    if config.vix_noise > 0:
        vix = vix + config.vix_noise * rng.standard_normal(n)
    vix = np.maximum(vix, 0.5)
    dates = pd.bdate_range(config.start_date, periods=n)

    series = []
    for a, scale in enumerate(_asset_scales(config)):
        sigma = scale * vols[states]
        mu = drifts[states]
        r = mu + sigma * _innovations(rng, config.df, n)
        r[0] = 0.0
        close = config.start_price * np.exp(np.cumsum(r))
        open_ = np.empty(n)
        open_[0] = close[0]
        open_[1:] = close[:-1]
        up = np.abs(rng.standard_normal(n)) * 0.5 * sigma
        dn = np.abs(rng.standard_normal(n)) * 0.5 * sigma
        high = np.maximum(open_, close) * np.exp(up)
        low = np.minimum(open_, close) * np.exp(-dn)
        logv = (
            np.log(config.base_volume)
            + config.volume_vol_beta * (sigma / (scale * vols.min()) - 1.0)
            + config.volume_noise * rng.standard_normal(n)
        )
        volume = np.round(np.exp(logv))
        frame = pd.DataFrame(
            {"date": dates, "open": open_, "high": high, "low": low, "close": close, "volume": volume}
        )
        series.append(AssetSeries(f"SYN{a + 1}", frame))

    vix_frame = pd.DataFrame({"date": dates, "vix": vix})
    return SynthPanel(series, vix_frame, forward_vol, states)


def synth_to_merged(panel: SynthPanel) -> List[AssetSeries]:
    from .market_data import merge_vix

    return [merge_vix(s, panel.vix) for s in panel.series]


def bars_needed(panel_rows: int) -> int:
    """Bars required so that the feature panel has ``panel_rows`` rows."""
    from .market_data import DRAWDOWN_WINDOW

    return panel_rows + DRAWDOWN_WINDOW

