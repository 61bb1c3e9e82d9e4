"""Strictly chronological rolling backtest.

For every origin (test row) the engine slices a single window of
``layout.history + 1`` rows ending at the test row. The baseline is fitted
on the training block of that window; proxy medians, regime thresholds and
stress thresholds are frozen from the same block; selectors fit candidates
on the fit block and score them on the evaluation block; the chosen rule is
re-estimated on the calibration block and applied to the test row. The
realized target of the test row is only read when the record is written.
"""
from __future__ import annotations

import csv
import io
import logging
import zlib
from dataclasses import astuple, dataclass, field, fields, replace
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from . import baselines as bl
from . import state_model as sm
from .errors import BadConfig, TooShort
from .market_data import FEATURE_COLUMNS, FeaturePanel
from .recalibration import RecalRule, ScalarRule, apply, calibrate, proxy_power
from .selection import (
    Block,
    SelectorConfig,
    enumerate_monotone_tuples,
    evaluate_candidates,
    regime_stress_subset,
    screen,
    select_global_avg,
    select_global_stress,
    select_regime,
)

log = logging.getLogger(__name__)

METHODS = ("base", "rho0", "rho1", "global_avg", "global_stress", "regime_avg", "regime_stress")
SCENARIOS = ("clean", "underreact")
RECORD_HEADER = (
    "asset,date,y,baseline_q,adjusted_q,shift,hit,method,baseline,scenario,"
    "rho_low,rho_mid,rho_high,rho_eff,c,v,regime,strict_stress"
).split(",")


@dataclass(frozen=True)
class WindowLayout:
    train_len: int = 504
    fit_len: int = 84
    eval_len: int = 168
    calib_len: int = 126
    test_len: int = 1

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise BadConfig(f"window length {f.name} must be positive")
        if self.test_len != 1:
            raise BadConfig("only one-step test blocks are supported")

    @property
    def select_len(self) -> int:
        return self.fit_len + self.eval_len

    @property
    def history(self) -> int:
        """Rows before the first test row."""
        return self.train_len + self.select_len + self.calib_len

    @property
    def span_len(self) -> int:
        """Rows the baseline must forecast: selection + calibration + test."""
        return self.select_len + self.calib_len + self.test_len


def plan_origins(panel_len: int, layout: WindowLayout = WindowLayout()) -> List[int]:
    """Test-row indices; the first one is ``layout.history``."""
    return list(range(layout.history, max(layout.history, panel_len)))


@dataclass(frozen=True)
class RunSpec:
    assets: Tuple[str, ...]
    baselines: Tuple[str, ...] = ("HS",)
    methods: Tuple[str, ...] = METHODS
    scenarios: Tuple[str, ...] = SCENARIOS
    alpha: float = 0.05
    kappa: float = 0.4
    layout: WindowLayout = WindowLayout()
    selector: SelectorConfig = SelectorConfig()
    seed: int = 0
    caviar_starts: int = 20

    def __post_init__(self):
        for name in ("assets", "baselines", "methods", "scenarios"):
            if not getattr(self, name):
                raise BadConfig(f"{name} must be nonempty")
        bad = [b for b in self.baselines if b not in bl.METHODS]
        bad += [m for m in self.methods if m not in METHODS]
        bad += [s for s in self.scenarios if s not in SCENARIOS]
        if bad:
            raise BadConfig(f"unknown names in run spec: {bad}")
        if not 0.0 < self.alpha < 0.5:
            raise BadConfig("alpha must lie in (0, 0.5)")
        if not 0.0 < self.kappa < 1.0:
            raise BadConfig("kappa must lie in (0, 1)")
        if self.selector.alpha != self.alpha:
            # the selector always works at the run's level
            object.__setattr__(self, "selector", replace(self.selector, alpha=self.alpha))


@dataclass(frozen=True)
class ForecastRecord:
    asset: str
    date: str
    y: float
    baseline_q: float
    adjusted_q: float
    shift: float
    hit: int
    method: str
    baseline: str
    scenario: str
    rho_low: float
    rho_mid: float
    rho_high: float
    rho_eff: float
    c: float
    v: float
    regime: str
    strict_stress: int


class CellKey(NamedTuple):
    asset: str
    baseline: str
    method: str
    scenario: str

    def label(self) -> str:
        return "/".join(self)


@dataclass
class BacktestResult:
    cells: Dict[CellKey, List[ForecastRecord]]
    baseline_audit: Dict[Tuple[str, str], dict] = field(default_factory=dict)
    selector_audit: Dict[CellKey, dict] = field(default_factory=dict)
    state_audit: Dict[str, dict] = field(default_factory=dict)


def origin_seed(seed: int, asset: str, baseline: str, origin: int) -> int:
    ss = np.random.SeedSequence([seed, zlib.crc32(asset.encode()), zlib.crc32(baseline.encode()), origin])
    return int(ss.generate_state(1)[0])


# --- per-origin pieces ------------------------------------------------------


@dataclass(frozen=True)
class WindowArrays:
    """Per-origin slice of every column the pipeline consumes."""

    y: np.ndarray
    X: np.ndarray
    roll_vol: np.ndarray
    garch_vol: np.ndarray
    ewma_vol: np.ndarray
    vix: np.ndarray
    drawdown: np.ndarray


class PanelArrays:
    def __init__(self, panel: FeaturePanel):
        self.asset = panel.asset_id
        self.dates = [str(d) for d in np.datetime_as_string(panel.dates.astype("datetime64[D]"), unit="D")]
        self.y = panel.column("y")
        self.X = panel.frame[list(FEATURE_COLUMNS)].to_numpy(dtype=float)
        self.roll_vol = panel.column("roll_vol_20")
        self.garch_vol = panel.column("garch_vol_proxy")
        self.ewma_vol = panel.column("ewma_vol_20")
        self.vix = panel.column("vix_daily")
        self.drawdown = panel.column("drawdown_60")

    def __len__(self):
        return self.y.size

    def window(self, origin: int, layout: WindowLayout) -> WindowArrays:
        lo, hi = origin - layout.history, origin + 1
        return WindowArrays(
            self.y[lo:hi], self.X[lo:hi], self.roll_vol[lo:hi], self.garch_vol[lo:hi],
            self.ewma_vol[lo:hi], self.vix[lo:hi], self.drawdown[lo:hi],
        )


def fit_baseline(name: str, w: WindowArrays, layout: WindowLayout, alpha: float, seed: int, caviar_starts: int = 20) -> bl.BaselineForecast:
    """Baseline path over the selection, calibration and test rows of ``w``.

    Only training-block targets are used for fitting. Span features are
    observable at their own dates; AS-CAViaR reads realized span targets
    strictly before each step.
    """
    tr = slice(0, layout.train_len)
    sp = slice(layout.train_len, None)
    y_tr = w.y[tr]
    h = layout.span_len
    if name == "HS":
        return bl.hs_forecast(y_tr, alpha, h)
    if name == "FHS":
        return bl.fhs_forecast(y_tr, w.ewma_vol[tr], w.ewma_vol[sp], alpha)
    if name == "GPQ":
        return bl.gpq_forecast(y_tr, w.garch_vol[tr], w.garch_vol[sp], alpha)
    if name == "QR":
        return bl.qr_forecast(w.X[tr], y_tr, w.X[sp], alpha)
    if name == "GARCH_T":
        return bl.garch_t_forecast(y_tr, h, alpha)
    if name == "GJR_GARCH_T":
        return bl.gjr_garch_t_forecast(y_tr, h, alpha)
    if name == "AS_CAVIAR":
        # the last span target is the realized test outcome; never consumed
        return bl.as_caviar_forecast(y_tr, w.y[sp][:-1], alpha, caviar_starts, seed)
    raise BadConfig(f"unknown baseline {name!r}")


def _safe_baseline(name, w, layout, alpha, seed, caviar_starts) -> bl.BaselineForecast:
    try:
        fc = fit_baseline(name, w, layout, alpha, seed, caviar_starts)
        if fc.q.shape != (layout.span_len,) or not np.all(np.isfinite(fc.q)):
            raise FloatingPointError("non-finite baseline path")
        return fc
    except Exception as exc:  # noqa: BLE001 - any fit failure becomes a fallback
        if name == "HS":
            raise
        log.warning("%s baseline failed (%s); HS fallback", name, exc)
        fc = bl.hs_forecast(w.y[: layout.train_len], alpha, layout.span_len)
        return bl.BaselineForecast(name, fc.q, {"converged": False, "fallback": True, "error": str(exc)})


@dataclass(frozen=True)
class WindowState:
    """Train-frozen state quantities on the span rows."""

    v_clean: np.ndarray
    v_under: np.ndarray
    regimes: np.ndarray
    strict: np.ndarray
    select_flags: np.ndarray
    select_audit: dict


def window_state(w: WindowArrays, layout: WindowLayout, kappa: float, min_stress_count: int = 10) -> WindowState:
    tr = slice(0, layout.train_len)
    sp = slice(layout.train_len, None)
    v = sm.composite_proxy(w.roll_vol, w.garch_vol, w.vix, tr, sp).values
    regimes = sm.regime_labels(w.vix, tr, sp)
    strict = sm.strict_stress_flags(w.vix, w.drawdown, tr, sp)
    ev = slice(layout.train_len + layout.fit_len, layout.train_len + layout.select_len)
    flags, audit = sm.selection_stress_flags(w.vix, tr, ev, min_count=min_stress_count)
    return WindowState(v, sm.apply_underreaction(v, strict, kappa), regimes, strict, flags, audit)


def _blocks(y, q, v, g, layout: WindowLayout):
    f, e, c = layout.fit_len, layout.eval_len, layout.calib_len
    fit = Block(y[:f], q[:f], v[:f], g[:f])
    ev = Block(y[f : f + e], q[f : f + e], v[f : f + e], g[f : f + e])
    cal = Block(y[f + e : f + e + c], q[f + e : f + e + c], v[f + e : f + e + c], g[f + e : f + e + c])
    return fit, ev, cal


class _Selections(NamedTuple):
    rules: Dict[str, RecalRule]
    audit: Dict[str, dict]


def select_rules(methods: Sequence[str], fit: Block, ev: Block, state: WindowState, cfg: SelectorConfig, tuples) -> _Selections:
    rules: Dict[str, RecalRule] = {}
    audit: Dict[str, dict] = {}
    if "rho0" in methods:
        rules["rho0"] = ScalarRule(0.0)
    if "rho1" in methods:
        rules["rho1"] = ScalarRule(1.0)
    if "global_avg" in methods or "global_stress" in methods:
        scalars = [ScalarRule(r) for r in cfg.rho_grid]
        cands = evaluate_candidates(scalars, fit, ev, state.select_flags, cfg.alpha)
        if "global_avg" in methods:
            rules["global_avg"] = select_global_avg(cands)
        if "global_stress" in methods:
            rules["global_stress"] = select_global_stress(cands, cfg)
            audit["global_stress"] = {
                "feasible": sum(e.feasible for e in screen(cands, cfg)),
                "stress_percentile": state.select_audit["percentile"],
                "stress_count": state.select_audit["count"],
            }
    if "regime_avg" in methods or "regime_stress" in methods:
        subset, source = regime_stress_subset(ev.g, state.select_flags)
        cands = evaluate_candidates(tuples, fit, ev, subset, cfg.alpha)
        if "regime_avg" in methods:
            rules["regime_avg"] = select_regime(cands, "average", cfg)
        if "regime_stress" in methods:
            rules["regime_stress"] = select_regime(cands, "stress", cfg)
            audit["regime_stress"] = {
                "feasible": sum(e.feasible for e in screen(cands, cfg)),
                "subset": source,
                "stress_count": int(np.sum(subset)),
            }
    return _Selections(rules, audit)


def _new_selector_audit() -> dict:
    return {"origins": 0, "infeasible_origins": 0, "feasible_total": 0, "subset_sources": {}, "stress_percentiles": {}}


def _update_selector_audit(agg: dict, a: dict) -> None:
    agg["origins"] += 1
    agg["feasible_total"] += a["feasible"]
    agg["infeasible_origins"] += int(a["feasible"] == 0)
    if "subset" in a:
        agg["subset_sources"][a["subset"]] = agg["subset_sources"].get(a["subset"], 0) + 1
    if "stress_percentile" in a:
        key = f"{a['stress_percentile']:g}"
        agg["stress_percentiles"][key] = agg["stress_percentiles"].get(key, 0) + 1


def run_backtest(panel: FeaturePanel, spec: RunSpec, origins: Optional[Iterable[int]] = None) -> BacktestResult:
    """Every (baseline, method, scenario) cell of one asset.

    One baseline fit per origin serves all methods and scenarios. Baseline
    failures become HS fallbacks flagged in the audit. ``origins`` restricts
    the run to a subset of the planned test rows.
    """
    arr = PanelArrays(panel)
    layout = spec.layout
    planned = plan_origins(len(arr), layout)
    if not planned:
        raise TooShort(f"panel of {len(arr)} rows has no origin (needs > {layout.history})")
    todo = planned if origins is None else [o for o in origins if o in set(planned)]
    asset = panel.asset_id
    cfg = spec.selector
    tuples = enumerate_monotone_tuples(cfg.tuple_grid)
    result = BacktestResult({})
    for b in spec.baselines:
        for m in spec.methods:
            for s in spec.scenarios:
                result.cells[CellKey(asset, b, m, s)] = []
                if m in ("global_stress", "regime_stress"):
                    result.selector_audit[CellKey(asset, b, m, s)] = _new_selector_audit()
        result.baseline_audit[(asset, b)] = {"fits": 0, "fallbacks": 0, "per_origin": []}
    state_counts = {"origins": 0, "strict_test_dates": 0, "selection_stress_exhausted": 0}

    for o in todo:
        w = arr.window(o, layout)
        state = window_state(w, layout, spec.kappa, cfg.min_stress_count)
        state_counts["origins"] += 1
        state_counts["strict_test_dates"] += int(state.strict[-1])
        state_counts["selection_stress_exhausted"] += int(state.select_audit["exhausted"])
        y_span = w.y[layout.train_len :]
        y_test = float(y_span[-1])
        date = arr.dates[o]
        g = state.regimes
        for b in spec.baselines:
            fc = _safe_baseline(b, w, layout, spec.alpha, origin_seed(spec.seed, asset, b, o), spec.caviar_starts)
            ba = result.baseline_audit[(asset, b)]
            ba["fits"] += 1
            ba["fallbacks"] += int(fc.fallback)
            ba["per_origin"].append(
                {
                    "date": date,
                    "converged": bool(fc.diagnostics.get("converged", True)),
                    "fallback": fc.fallback,
                    "loglik": fc.diagnostics.get("loglik"),
                }
            )
            q = fc.q
            q_test = float(q[-1])
            for s in spec.scenarios:
                v = state.v_clean if s == "clean" else state.v_under
                fit, ev, cal = _blocks(y_span, q, v, g, layout)
                sel = select_rules(spec.methods, fit, ev, state, cfg, tuples)
                for m in spec.methods:
                    key = CellKey(asset, b, m, s)
                    if m == "base":
                        rec = ForecastRecord(asset, date, y_test, q_test, q_test, 0.0, int(y_test <= q_test), m, b, s,
                                             0.0, 0.0, 0.0, 0.0, 0.0, float(v[-1]), sm.REGIME_NAMES[g[-1]], int(state.strict[-1]))
                    else:
                        rule = sel.rules[m]
                        cal_rule = calibrate(rule, cal.y, cal.q, cal.v, spec.alpha, cal.g, origin=date)
                        adj = apply(cal_rule, q_test, v[-1], g[-1])
                        rho_eff = float(rule.exponents(np.array([g[-1]]), 1)[0])
                        comps = rule.components
                        rec = ForecastRecord(asset, date, y_test, q_test, adj, adj - q_test, int(y_test <= adj), m, b, s,
                                             comps[0], comps[1], comps[2], rho_eff, cal_rule.c, float(v[-1]),
                                             sm.REGIME_NAMES[g[-1]], int(state.strict[-1]))
                        if m in sel.audit:
                            _update_selector_audit(result.selector_audit[key], sel.audit[m])
                    result.cells[key].append(rec)
    result.state_audit[asset] = {**state_counts, **{k: v for k, v in panel.audit.items()}}
    return result


def reconstruct_shift(rec: ForecastRecord) -> float:
    """``c * v ** rho_eff`` from the logged fields."""
    return float(rec.c * proxy_power(rec.v, rec.rho_eff))


def pool_records(streams: Iterable[Sequence[ForecastRecord]]) -> List[ForecastRecord]:
    """Concatenate per-asset streams into one sequence ordered by (date, asset)."""
    out = [r for s in streams for r in s]
    return sorted(out, key=lambda r: (r.date, r.asset))


# --- serialization ----------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def records_to_csv(records: Sequence[ForecastRecord]) -> bytes:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(RECORD_HEADER)
    for r in records:
        wr.writerow([_fmt(x) for x in astuple(r)])
    return buf.getvalue().encode()


def records_from_csv(text: str) -> List[ForecastRecord]:
    rd = csv.DictReader(io.StringIO(text))
    out = []
    floats = {"y", "baseline_q", "adjusted_q", "shift", "rho_low", "rho_mid", "rho_high", "rho_eff", "c", "v"}
    ints = {"hit", "strict_stress"}
    for row in rd:
        kw = {k: float(v) if k in floats else int(v) if k in ints else v for k, v in row.items()}
        out.append(ForecastRecord(**kw))
    return out
