import math

import numpy as np
import pandas as pd
import pytest

from varrecal import market_data as md
from varrecal.errors import EmptySeries, IngestError, MalformedRow, NoOverlap, OhlcViolation, TooShort
from varrecal.synth import SynthConfig, synth_generate, synth_to_merged

from .conftest import make_series

HEADER = "date,open,high,low,close,volume\n"


def write(tmp_path, text, name="a.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


# --- ingestion ------------------------------------------------------------------


def test_duplicate_date_keeps_highest_volume_record(tmp_path):
    p = write(tmp_path, HEADER + "2020-01-02,10,11,9,10.5,200\n2020-01-02,10,11,9,10.2,100\n2020-01-03,10,11,9,10,50\n")
    s = md.ingest_csv(p, "X")
    assert len(s) == 2
    first = s.frame.iloc[0]
    assert first["volume"] == 200 and first["close"] == 10.5


def test_clean_file_is_unchanged(tmp_path):
    rows = ["2020-01-02,10,11,9,10.5,100", "2020-01-03,10.5,11,10,10.8,120", "2020-01-06,10.8,11.2,10.1,11,90"]
    s = md.ingest_csv(write(tmp_path, HEADER + "\n".join(rows) + "\n"), "X")
    assert len(s) == 3
    assert s.frame["close"].tolist() == [10.5, 10.8, 11.0]
    assert list(s.frame["date"].dt.strftime("%Y-%m-%d")) == ["2020-01-02", "2020-01-03", "2020-01-06"]


def test_unsorted_input_is_sorted(tmp_path):
    s = md.ingest_csv(write(tmp_path, HEADER + "2020-01-03,1,2,1,1.5,1\n2020-01-02,1,2,1,1.2,1\n"), "X")
    assert s.frame["date"].is_monotonic_increasing


def test_low_above_high_is_rejected(tmp_path):
    with pytest.raises(OhlcViolation):
        md.ingest_csv(write(tmp_path, HEADER + "2020-01-02,10,9,11,10,100\n"), "X")


def test_malformed_field_names_line(tmp_path):
    with pytest.raises(MalformedRow, match="line 3"):
        md.ingest_csv(write(tmp_path, HEADER + "2020-01-02,10,11,9,10,100\n2020-01-03,10,abc,9,10,100\n"), "X")


def test_empty_file_is_rejected(tmp_path):
    with pytest.raises(EmptySeries):
        md.ingest_csv(write(tmp_path, HEADER), "X")


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.csv"):
        md.ingest_csv(tmp_path / "nope.csv", "X")


def test_range_is_widened_to_contain_open_and_close(tmp_path):
    s = md.ingest_csv(write(tmp_path, HEADER + "2020-01-02,10,10.5,9.5,10.8,100\n"), "X")
    bar = next(s.bars())
    assert bar.high == 10.8 and bar.low == 9.5


def test_ingest_is_idempotent(tmp_path):
    s = make_series(100 * np.exp(np.cumsum(np.random.default_rng(0).normal(0, 0.01, 50))), vix=20.0)
    p = tmp_path / "panel.csv"
    md.write_series_csv(s, p)
    again = md.read_series_csv(p, "TST")
    pd.testing.assert_frame_equal(again.frame, s.frame)
    p2 = tmp_path / "panel2.csv"
    md.write_series_csv(again, p2)
    assert md.file_checksum(p) == md.file_checksum(p2)


# --- VIX merge ------------------------------------------------------------------


def _vix(dates, level=20.0):
    return pd.DataFrame({"date": dates, "vix": level})


def test_merge_full_overlap():
    s = make_series(np.linspace(100, 104, 5))
    assert len(md.merge_vix(s, _vix(s.frame["date"]))) == 5


def test_merge_drops_unmatched_dates():
    s = make_series(np.linspace(100, 104, 5))
    m = md.merge_vix(s, _vix(s.frame["date"].drop(index=2)))
    assert len(m) == 4 and m.frame["date"].is_monotonic_increasing


def test_merge_disjoint_dates():
    s = make_series(np.linspace(100, 104, 5))
    with pytest.raises(NoOverlap):
        md.merge_vix(s, _vix(pd.bdate_range("1999-01-01", periods=5)))


def test_vix_csv_requires_positive_level(tmp_path):
    p = write(tmp_path, "date,vix\n2020-01-02,0\n", "vix.csv")
    with pytest.raises(MalformedRow):
        md.read_vix(p)


# --- returns and features -------------------------------------------------------


@pytest.mark.parametrize("closes,expected", [((100, 100), 0.0), ((100, 110), 0.0953102), ((100, 50), -0.6931472)])
def test_log_returns(closes, expected):
    assert md.log_returns(make_series(closes))[0] == pytest.approx(expected, abs=1e-7)


def test_log_returns_too_short():
    with pytest.raises(TooShort):
        md.log_returns(make_series([100.0]))


def test_flat_path_features():
    s = make_series(np.full(80, 50.0), vix=20.0, spread=0.0)
    f = md.build_features(s).frame
    assert np.all(f["roll_vol_20"] == 0) and np.all(f["drawdown_60"] == 0) and np.all(f["parkinson"] == 0)


def test_drawdown_half_of_peak():
    closes = np.concatenate([np.full(70, 100.0), [50.0, 60.0]])
    f = md.bar_features(make_series(closes, vix=20.0))
    assert f["drawdown_60"].iloc[70] == pytest.approx(-0.5, abs=1e-15)


def test_range_estimators_at_unit_log_range():
    frame = pd.DataFrame({"date": pd.bdate_range("2020-01-01", periods=2), "open": [1.0, 1.0], "high": [math.e, math.e],
                          "low": [1.0, 1.0], "close": [1.0, 1.0], "volume": [1.0, 1.0], "vix": [20.0, 20.0]})
    f = md.bar_features(md.AssetSeries("X", frame))
    assert f["parkinson"].iloc[0] == pytest.approx(0.6005612, abs=1e-7)
    assert f["garman_klass"].iloc[0] == pytest.approx(math.sqrt(0.5), abs=1e-12)


def test_build_features_too_short():
    with pytest.raises(TooShort):
        md.build_features(make_series(np.linspace(100, 101, 69), vix=20.0))


def test_features_need_vix():
    with pytest.raises(IngestError):
        md.bar_features(make_series(np.linspace(100, 101, 80)))


def _brute_force(series):
    """Every feature recomputed from raw bars with explicit loops."""
    f = series.frame
    o, h, lo, c, v, x = (f[k].tolist() for k in ("open", "high", "low", "close", "volume", "vix"))
    n = len(c)
    r = [math.nan] + [math.log(c[t] / c[t - 1]) for t in range(1, n)]
    lam = 1 - 2 / 21
    ewma = [math.nan] * n
    mean = var = None
    for t in range(1, n):
        if t == 1:
            mean, var = r[1], 0.0
        else:
            mean = lam * mean + (1 - lam) * r[t]
            var = lam * var + (1 - lam) * (r[t] - mean) ** 2
        ewma[t] = math.sqrt(var)
    rows = {}
    for t in range(n):
        if t < 59 or t == n - 1:
            continue
        win = r[t - 19 : t + 1]
        m = sum(win) / 20
        lv = [math.log(v[s]) for s in range(t - 19, t + 1)]
        lm = sum(lv) / 20
        lsd = math.sqrt(sum((a - lm) ** 2 for a in lv) / 19)
        hl, co = math.log(h[t] / lo[t]), math.log(c[t] / o[t])
        rows[t] = {
            "ret_lag0": r[t], "ret_lag1": r[t - 1], "ret_lag2": r[t - 2], "ret_lag3": r[t - 3], "ret_lag5": r[t - 5],
            "roll_vol_20": math.sqrt(sum((a - m) ** 2 for a in win) / 19),
            "ewma_vol_20": ewma[t],
            "parkinson": math.sqrt(hl * hl / (4 * math.log(2))),
            "garman_klass": math.sqrt(max(0.0, 0.5 * hl * hl - (2 * math.log(2) - 1) * co * co)),
            "vix_daily": x[t] / (100 * math.sqrt(252)),
            "vix_pct_change": x[t] / x[t - 1] - 1,
            "drawdown_60": c[t] / max(c[t - 59 : t + 1]) - 1,
            "log_volume": math.log(v[t]),
            "volume_z_20": (math.log(v[t]) - lm) / lsd,
            "y": r[t + 1],
        }
    return rows


def test_features_match_brute_force_oracle():
    s = synth_to_merged(synth_generate(SynthConfig(n_assets=1, length=200), 5))[0]
    panel = md.build_features(s)
    oracle = _brute_force(s)
    dates = s.frame["date"].tolist()
    assert len(panel.frame) == len(oracle)
    for _, row in panel.frame.iterrows():
        want = oracle[dates.index(row["date"])]
        for k, val in want.items():
            assert row[k] == pytest.approx(val, abs=1e-12, rel=0), k


def test_dropping_last_bar_keeps_earlier_features():
    s = synth_to_merged(synth_generate(SynthConfig(n_assets=1, length=150), 6))[0]
    full = md.bar_features(s)
    short = md.bar_features(md.AssetSeries(s.asset_id, s.frame.iloc[:-1].reset_index(drop=True)))
    cols = [c for c in md.FEATURE_COLUMNS if c != "garch_vol_proxy"]
    pd.testing.assert_frame_equal(full[cols].iloc[:-1], short[cols], check_exact=True)
    # the target of the new last row is unknown, not invented
    assert np.isnan(short["y"].iloc[-1])


def test_volume_z_standardizes_each_window():
    rng = np.random.default_rng(3)
    s = make_series(np.linspace(100, 110, 90), vix=20.0, volume=np.exp(rng.normal(13, 0.5, 90)))
    f = md.bar_features(s)
    t = 50
    logv = f["log_volume"].to_numpy()[t - 19 : t + 1]
    z = (logv - logv.mean()) / logv.std(ddof=1)
    assert f["volume_z_20"].iloc[t] == pytest.approx(z[-1], abs=1e-12)


def test_volume_z_constant_volume_is_zero():
    f = md.bar_features(make_series(np.linspace(100, 110, 90), vix=20.0))
    assert np.all(f["volume_z_20"].iloc[20:] == 0.0)


def test_retained_rows_have_no_missing_values(synth_series):
    f = md.build_features(synth_series).frame
    assert np.isfinite(f[md.REQUIRED_COLUMNS].to_numpy(dtype=float)).all()
    assert f["date"].is_monotonic_increasing and f["date"].is_unique
    assert (f["drawdown_60"] <= 0).all() and (f["drawdown_60"] >= -1).all()
    assert (f[["roll_vol_20", "ewma_vol_20", "parkinson", "garman_klass", "vix_daily"]] >= 0).all().all()


# --- remote fetch ---------------------------------------------------------------


def test_remote_fetch_caches_body(server, tmp_path):
    handler, url = server
    handler.body = (HEADER + "2020-01-02,10,11,9,10,100\n").encode()
    path = md.fetch_remote_csv(url, "SPY", tmp_path)
    assert path.read_bytes() == handler.body
    handler.status = 500  # the cache is reused, no second request needed
    assert md.fetch_remote_csv(url, "SPY", tmp_path) == path


def test_remote_server_error_leaves_no_cache(server, tmp_path):
    handler, url = server
    handler.status = 500
    with pytest.raises(IngestError):
        md.fetch_remote_csv(url, "SPY", tmp_path / "cache")
    assert not (tmp_path / "cache").exists() or not any((tmp_path / "cache").iterdir())


def test_atomic_write_replaces_whole_file(tmp_path):
    p = tmp_path / "x.bin"
    md.atomic_write_bytes(p, b"one")
    md.atomic_write_bytes(p, b"two")
    assert p.read_bytes() == b"two"
    assert [f.name for f in tmp_path.iterdir()] == ["x.bin"]
