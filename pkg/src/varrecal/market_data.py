"""OHLCV + VIX ingestion, cleaning and the daily predictor set."""
from __future__ import annotations

import hashlib
import io
import logging
import os
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Union

import numpy as np
import pandas as pd

from .errors import EmptySeries, IngestError, MalformedRow, NoOverlap, OhlcViolation, TooShort

log = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

BAR_COLUMNS = ["date", "open", "high", "low", "close", "volume"]
ANNUALIZATION = 100.0 * np.sqrt(252.0)

ROLL_WINDOW = 20
EWMA_SPAN = 20
DRAWDOWN_WINDOW = 60
RETURN_LAGS = (0, 1, 2, 3, 5)

FEATURE_COLUMNS = [
    "ret_lag0",
    "ret_lag1",
    "ret_lag2",
    "ret_lag3",
    "ret_lag5",
    "roll_vol_20",
    "ewma_vol_20",
    "parkinson",
    "garman_klass",
    "vix_daily",
    "vix_pct_change",
    "drawdown_60",
    "log_volume",
    "volume_z_20",
    "garch_vol_proxy",
]
# Columns that must be present for a row to be retained (garch_vol_proxy is
# filled later with an EWMA fallback, so it never causes a drop).
REQUIRED_COLUMNS = [c for c in FEATURE_COLUMNS if c != "garch_vol_proxy"] + ["y"]


@dataclass(frozen=True)
class Bar:
    date: pd.Timestamp
    open: float
    high: float
    low: float
    close: float
    volume: float

    def __post_init__(self):
        if not (self.low > 0 and self.high >= max(self.open, self.close) and self.low <= min(self.open, self.close)):
            raise OhlcViolation(f"bar {self.date}: OHLC invariant violated")
        if self.volume < 0:
            raise OhlcViolation(f"bar {self.date}: negative volume")


@dataclass(frozen=True)
class AssetSeries:
    """Date-sorted daily bars for one asset, optionally with a ``vix`` column."""

    asset_id: str
    frame: pd.DataFrame

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def has_vix(self) -> bool:
        return "vix" in self.frame.columns

    def bars(self) -> Iterator[Bar]:
        for row in self.frame[BAR_COLUMNS].itertuples(index=False):
            yield Bar(*row)


@dataclass(frozen=True)
class FeaturePanel:
    """Retained feature rows for one asset.

    ``frame`` holds ``date``, every name in ``FEATURE_COLUMNS`` and the
    one-step-ahead target ``y``. ``history`` keeps the bar-level returns and
    EWMA volatility (including the burn-in before the first retained row),
    which the GARCH proxy needs.
    """

    asset_id: str
    frame: pd.DataFrame
    history: pd.DataFrame = field(repr=False, default=None)
    audit: dict = field(repr=False, default_factory=dict)

    def __len__(self) -> int:
        return len(self.frame)

    def column(self, name: str) -> np.ndarray:
        return self.frame[name].to_numpy(dtype=float)

    @property
    def dates(self) -> np.ndarray:
        return self.frame["date"].to_numpy()

    def head(self, n: int) -> "FeaturePanel":
        """First ``n`` rows; used for truncation (no-look-ahead) checks."""
        frame = self.frame.iloc[:n].reset_index(drop=True)
        history = None
        if self.history is not None and n > 0:
            last = frame["date"].iloc[-1]
            history = self.history[self.history["date"] <= last].reset_index(drop=True)
        return FeaturePanel(self.asset_id, frame, history, dict(self.audit))


def _parse_frame(raw: pd.DataFrame, source: str, numeric: list[str]) -> pd.DataFrame:
    out = pd.DataFrame()
    dates = pd.to_datetime(raw["date"], format="%Y-%m-%d", errors="coerce")
    bad = dates.isna()
    for col in numeric:
        out[col] = pd.to_numeric(raw[col], errors="coerce").astype(float)
        bad |= out[col].isna() | ~np.isfinite(out[col].to_numpy(dtype=float))
    if bad.any():
        line = int(np.flatnonzero(bad.to_numpy())[0]) + 2  # header is line 1
        raise MalformedRow(f"{source}: unparseable field on line {line}")
    for col in numeric:
        # pandas' fast parser can be off by one ulp; strtod is exact
        out[col] = raw[col].astype(float).to_numpy()
    out.insert(0, "date", dates)
    return out


def _read_csv(path_or_buf, source: str) -> pd.DataFrame:
    try:
        return pd.read_csv(path_or_buf, dtype=str, keep_default_na=False)
    except FileNotFoundError:
        raise
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise MalformedRow(f"{source}: {exc}") from exc


def clean_bars(raw: pd.DataFrame, asset_id: str, source: str = "<frame>") -> AssetSeries:
    """Parse, sort, de-duplicate and validate a raw bar table."""
    missing = [c for c in BAR_COLUMNS if c not in raw.columns]
    if missing:
        raise MalformedRow(f"{source}: missing columns {missing}")
    df = _parse_frame(raw, source, BAR_COLUMNS[1:])
    if df.empty:
        raise EmptySeries(f"{source}: no valid rows")
    if (df["volume"] < 0).any():
        raise MalformedRow(f"{source}: negative volume")
    # ascending volume within a date, so keep="last" retains the largest record
    df = df.sort_values(["date", "volume"], kind="mergesort")
    df = df.drop_duplicates("date", keep="last").reset_index(drop=True)
    if (df["high"] < df["low"]).any():
        d = df.loc[df["high"] < df["low"], "date"].iloc[0]
        raise OhlcViolation(f"{source}: high < low on {d.date()}")
    if (df[["open", "high", "low", "close"]] <= 0).any().any():
        raise OhlcViolation(f"{source}: nonpositive price")
    df["high"] = df[["high", "open", "close"]].max(axis=1)
    df["low"] = df[["low", "open", "close"]].min(axis=1)
    return AssetSeries(asset_id, df)


def ingest_csv(path: PathLike, asset_id: str) -> AssetSeries:
    """Read a ``date,open,high,low,close,volume`` file into a cleaned series.

    Rows are sorted by (date, volume) and duplicate dates keep the final
    record. High/low are widened to contain open and close.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    return clean_bars(_read_csv(path, str(path)), asset_id, str(path))


def read_vix(source: Union[PathLike, pd.DataFrame]) -> pd.DataFrame:
    if isinstance(source, pd.DataFrame):
        raw, name = source.copy(), "<vix frame>"
        if pd.api.types.is_datetime64_any_dtype(raw.get("date")):
            raw["date"] = raw["date"].dt.strftime("%Y-%m-%d")
    else:
        if not Path(source).exists():
            raise FileNotFoundError(f"no such file: {source}")
        raw, name = _read_csv(source, str(source)), str(source)
    if "date" not in raw.columns or "vix" not in raw.columns:
        raise MalformedRow(f"{name}: expected columns date,vix")
    vix = _parse_frame(raw, name, ["vix"])
    if (vix["vix"] <= 0).any():
        raise MalformedRow(f"{name}: VIX level must be positive")
    return vix.drop_duplicates("date", keep="last").sort_values("date").reset_index(drop=True)


def merge_vix(series: AssetSeries, vix_csv: Union[PathLike, pd.DataFrame]) -> AssetSeries:
    """Inner-join the bars with VIX levels on trading date."""
    vix = read_vix(vix_csv)
    bars = series.frame.drop(columns=["vix"], errors="ignore")
    merged = bars.merge(vix, on="date", how="inner").sort_values("date").reset_index(drop=True)
    if merged.empty:
        raise NoOverlap(f"{series.asset_id}: no common dates between bars and VIX")
    return AssetSeries(series.asset_id, merged)


def series_csv_bytes(series: AssetSeries) -> bytes:
    """Canonical CSV encoding (round-trips every float exactly)."""
    df = series.frame.copy()
    df["date"] = df["date"].dt.strftime("%Y-%m-%d")
    return df.to_csv(index=False, float_format="%.17g", lineterminator="\n").encode()


def write_series_csv(series: AssetSeries, path: PathLike) -> None:
    atomic_write_bytes(path, series_csv_bytes(series))


def read_series_csv(path: PathLike, asset_id: str) -> AssetSeries:
    """Inverse of ``write_series_csv``; a ``vix`` column is merged back in."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    raw = _read_csv(path, str(path))
    series = clean_bars(raw.drop(columns=["vix"], errors="ignore"), asset_id, str(path))
    if "vix" in raw.columns:
        series = merge_vix(series, raw[["date", "vix"]])
    return series


def log_returns(series: AssetSeries) -> np.ndarray:
    close = series.frame["close"].to_numpy(dtype=float)
    if close.size < 2:
        raise TooShort("need at least two bars for a return")
    return np.log(close[1:] / close[:-1])


def vix_daily_vol(vix: np.ndarray) -> np.ndarray:
    return np.asarray(vix, dtype=float) / ANNUALIZATION


def ewma_volatility(returns: np.ndarray, span: int = EWMA_SPAN) -> np.ndarray:
    """EWMA volatility of demeaned returns.

    The mean is itself an exponentially weighted mean with the same decay
    ``lam = 1 - 2/(span+1)``; variance starts at the first squared demeaned
    return. NaNs in the input restart nothing; they propagate.
    """
    lam = 1.0 - 2.0 / (span + 1.0)
    out = np.empty_like(returns, dtype=float)
    mean = var = np.nan
    for i, r in enumerate(returns):
        if i == 0:
            mean = r
            var = (r - mean) ** 2
        else:
            mean = lam * mean + (1.0 - lam) * r
            var = lam * var + (1.0 - lam) * (r - mean) ** 2
        out[i] = np.sqrt(var)
    return out


def _rolling(x: np.ndarray, window: int) -> np.ndarray:
    """Sliding windows aligned to their last element; shape (len(x), window), NaN-padded."""
    padded = np.concatenate([np.full(window - 1, np.nan), x])
    return np.lib.stride_tricks.sliding_window_view(padded, window)


def bar_features(series: AssetSeries) -> pd.DataFrame:
    """Every predictor on every bar, NaN where a lookback is incomplete."""
    if not series.has_vix:
        raise IngestError(f"{series.asset_id}: merge VIX before building features")
    f = series.frame
    o, h, l, c = (f[k].to_numpy(dtype=float) for k in ("open", "high", "low", "close"))
    vol = f["volume"].to_numpy(dtype=float)
    vix = f["vix"].to_numpy(dtype=float)
    n = len(f)

    r = np.full(n, np.nan)
    r[1:] = np.log(c[1:] / c[:-1])

    out = pd.DataFrame({"date": f["date"].to_numpy()})
    for lag in RETURN_LAGS:
        shifted = np.full(n, np.nan)
        shifted[lag:] = r[: n - lag] if lag else r
        out[f"ret_lag{lag}"] = shifted

    with np.errstate(invalid="ignore"):
        out["roll_vol_20"] = np.std(_rolling(r, ROLL_WINDOW), axis=1, ddof=1)
    ewma = np.full(n, np.nan)
    if n > 1:
        ewma[1:] = ewma_volatility(r[1:])
    out["ewma_vol_20"] = ewma

    hl = np.log(h / l)
    co = np.log(c / o)
    out["parkinson"] = np.sqrt(hl**2 / (4.0 * np.log(2.0)))
    out["garman_klass"] = np.sqrt(np.maximum(0.0, 0.5 * hl**2 - (2.0 * np.log(2.0) - 1.0) * co**2))

    out["vix_daily"] = vix_daily_vol(vix)
    pct = np.full(n, np.nan)
    pct[1:] = vix[1:] / vix[:-1] - 1.0
    out["vix_pct_change"] = pct

    peak = np.max(_rolling(c, DRAWDOWN_WINDOW), axis=1)  # NaN while incomplete
    out["drawdown_60"] = c / peak - 1.0

    with np.errstate(divide="ignore"):
        logv = np.where(vol > 0, np.log(np.where(vol > 0, vol, 1.0)), np.nan)
    out["log_volume"] = logv
    win = _rolling(logv, ROLL_WINDOW)
    with np.errstate(invalid="ignore", divide="ignore"):
        mu = win.mean(axis=1)
        sd = win.std(axis=1, ddof=1)
        z = np.where(sd > 0, (logv - mu) / np.where(sd > 0, sd, 1.0), 0.0)
    z[np.isnan(mu)] = np.nan
    out["volume_z_20"] = z

    out["garch_vol_proxy"] = np.nan
    y = np.full(n, np.nan)
    y[:-1] = r[1:]
    out["y"] = y
    out["ret"] = r
    return out


def build_features(series: AssetSeries) -> FeaturePanel:
    """Retained feature rows; ``garch_vol_proxy`` is left as NaN.

    See ``state_model.prepare_panel`` for the version with the proxy filled.
    """
    if len(series) < DRAWDOWN_WINDOW + 10:
        raise TooShort(f"{series.asset_id}: need at least {DRAWDOWN_WINDOW + 10} bars, got {len(series)}")
    full = bar_features(series)
    keep = full[REQUIRED_COLUMNS].notna().all(axis=1).to_numpy()
    keep &= np.isfinite(full[REQUIRED_COLUMNS].to_numpy(dtype=float)).all(axis=1)
    frame = full.loc[keep, ["date", *FEATURE_COLUMNS, "y"]].reset_index(drop=True)
    history = full[["date", "ret", "ewma_vol_20"]].copy()
    return FeaturePanel(series.asset_id, frame, history)


def file_checksum(path: PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def fetch_remote_csv(url_template: str, symbol: str, cache_dir: PathLike, timeout: float = 30.0) -> Path:
    """GET ``url_template`` with ``{symbol}`` substituted; cache the body to disk.

    A cached file is reused as-is. Any network or HTTP failure raises
    ``IngestError`` and leaves no partial file behind.
    """
    cache = Path(cache_dir) / f"{symbol}.csv"
    if cache.exists():
        return cache
    url = url_template.format(symbol=symbol)
    try:
        with urllib.request.urlopen(url, timeout=timeout) as resp:
            body = resp.read()
    except (urllib.error.URLError, OSError, ValueError) as exc:
        raise IngestError(f"fetch failed for {symbol} ({url}): {exc}") from exc
    # validate before caching so a garbage body never lands in the cache
    _read_csv(io.BytesIO(body), url)
    atomic_write_bytes(cache, body)
    log.info("cached %s -> %s", url, cache)
    return cache
