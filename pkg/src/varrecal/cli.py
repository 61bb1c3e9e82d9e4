"""Command-line entry point: ingest, backtest, report, verify-theory.

Exit codes: 0 success, 1 verification failure, 2 usage or config error,
3 data error.
"""
from __future__ import annotations

import argparse
import csv
import fnmatch
import hashlib
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from . import __version__
from . import market_data as md
from .config import RunConfig, load_config
from .engine import CellKey, ForecastRecord, pool_records, records_to_csv, run_backtest
from .errors import BadConfig, IngestError, MissingRun, VarRecalError
from .evaluation import summarize
from .recalibration import lower_quantile
from .state_model import prepare_panel
from .synth import synth_generate, synth_to_merged
from .theory import run_theory_suite

log = logging.getLogger("varrecal")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3
SCHEMA_VERSION = 1
MANIFEST = "manifest.json"


# --- small I/O helpers -------------------------------------------------------


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def _write(out: Path, rel: str, data: bytes, files: Dict[str, str]) -> None:
    """Atomic write that skips unchanged content and records the checksum."""
    path = out / rel
    digest = hashlib.sha256(data).hexdigest()
    if not (path.exists() and md.file_checksum(path) == digest):
        md.atomic_write_bytes(path, data)
    files[rel] = digest


def _update_manifest(out: Path, command: str, echo: dict, files: Dict[str, str]) -> None:
    path = out / MANIFEST
    man = json.loads(path.read_text()) if path.exists() else {}
    man.setdefault("files", {}).update(files)
    man.setdefault("runs", {})[command] = echo
    man["schema_version"] = SCHEMA_VERSION
    man["version"] = __version__
    md.atomic_write_bytes(path, _json_bytes(man))


def _read_manifest(run_dir: Path) -> dict:
    path = run_dir / MANIFEST
    if not path.is_file():
        raise MissingRun(f"no manifest in {run_dir}")
    man = json.loads(path.read_text())
    for rel, digest in man.get("files", {}).items():
        f = run_dir / rel
        if not f.is_file():
            raise MissingRun(f"manifest lists {rel} but it is missing")
        if md.file_checksum(f) != digest:
            raise MissingRun(f"checksum mismatch for {rel}")
    return man


# --- data loading -------------------------------------------------------------


def load_series(cfg: RunConfig) -> List[md.AssetSeries]:
    d = cfg.data
    if d.source == "synth":
        series = synth_to_merged(synth_generate(d.synth.to_synth(), cfg.seed))
    elif d.source == "csv":
        if not d.csv.assets or not d.csv.vix:
            raise BadConfig("csv source needs [data.csv] assets and vix")
        series = [md.merge_vix(md.ingest_csv(p, a), d.csv.vix) for a, p in sorted(d.csv.assets.items())]
    elif d.source == "remote":
        r = d.remote
        if not r.url_template or not r.symbols:
            raise BadConfig("remote source needs url_template and symbols")
        vix_path = md.fetch_remote_csv(r.url_template, r.vix_symbol, r.cache_dir)
        series = []
        for sym in r.symbols:
            path = md.fetch_remote_csv(r.url_template, sym, r.cache_dir)
            series.append(md.merge_vix(md.ingest_csv(path, sym), vix_path))
    else:
        root = Path(d.panels_dir)
        man = _read_manifest(root)
        names = sorted(f for f in man["files"] if f.startswith("panels/") and f.endswith(".csv"))
        series = [md.read_series_csv(root / f, Path(f).stem) for f in names]
    if cfg.assets:
        known = {s.asset_id for s in series}
        missing = [a for a in cfg.assets if a not in known]
        if missing:
            raise BadConfig(f"assets not found in data source: {missing}")
        series = [s for s in series if s.asset_id in set(cfg.assets)]
    return series


def cmd_ingest(cfg: RunConfig, out: Path) -> int:
    """Write canonical merged panels plus checksums; unchanged inputs are a no-op."""
    files: Dict[str, str] = {}
    for s in load_series(cfg):
        _write(out, f"panels/{s.asset_id}.csv", md.series_csv_bytes(s), files)
    _update_manifest(out, "ingest", {"config": cfg.model_dump(mode="json")}, files)
    print(f"ingested {len(files)} panel(s) into {out}")
    return EXIT_OK


# --- backtest -----------------------------------------------------------------


def _cell_filter(patterns: Optional[str]):
    pats = [p.strip() for p in (patterns or "*").split(",") if p.strip()] or ["*"]
    return lambda key: any(fnmatch.fnmatchcase(key.label(), p) for p in pats)


def _prepare(args):
    series, lookback = args
    return prepare_panel(series, lookback)


def _job(args):
    panel, spec = args
    try:
        return run_backtest(panel, spec), None
    except VarRecalError as exc:
        return None, f"{type(exc).__name__}: {exc}"


def _pmap(fn, items: Sequence, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as ex:
        return list(ex.map(fn, items))


def _summary_entry(records: Sequence[ForecastRecord], alpha: float) -> dict:
    m = summarize([r.y for r in records], [r.adjusted_q for r in records], [r.strict_stress for r in records], alpha)
    return m.to_dict()


def _clean_json(obj):
    """Replace non-finite floats by None so the JSON stays standard."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean_json(v) for v in obj]
    return obj


def cmd_backtest(cfg: RunConfig, out: Path, workers: int = 1, cells: Optional[str] = None) -> int:
    keep = _cell_filter(cells)
    cfg.run_spec(["_"])  # fail on a bad layout or selector before any heavy work
    series = load_series(cfg)
    wanted: Dict[Tuple[str, str], List[CellKey]] = {}
    for s in series:
        for b in cfg.baselines:
            ks = [CellKey(s.asset_id, b, m, sc) for m in cfg.methods for sc in cfg.scenarios]
            ks = [k for k in ks if keep(k)]
            if ks:
                wanted[(s.asset_id, b)] = ks
    if not wanted:
        raise BadConfig(f"cell filter {cells!r} matches nothing")
    needed = [s for s in series if any(a == s.asset_id for a, _ in wanted)]
    panels = dict(zip([s.asset_id for s in needed], _pmap(_prepare, [(s, cfg.data.garch_lookback) for s in needed], workers)))

    base_spec = cfg.run_spec([s.asset_id for s in needed])
    jobs, job_keys = [], []
    for (asset, b), ks in wanted.items():
        methods = tuple(m for m in cfg.methods if any(k.method == m for k in ks))
        scen = tuple(sc for sc in cfg.scenarios if any(k.scenario == sc for k in ks))
        jobs.append((panels[asset], replace(base_spec, assets=(asset,), baselines=(b,), methods=methods, scenarios=scen)))
        job_keys.append((asset, b))
    results = _pmap(_job, jobs, workers)

    files: Dict[str, str] = {}
    cell_records: Dict[CellKey, List[ForecastRecord]] = {}
    summary = {"schema_version": SCHEMA_VERSION, "alpha": cfg.alpha, "kappa": cfg.kappa, "cells": {}, "pooled": {},
               "baseline_diagnostics": {}, "state": {}, "errors": {}}
    selector_audit = {}
    for (asset, b), (res, err) in zip(job_keys, results):
        if err is not None:
            log.error("%s/%s failed: %s", asset, b, err)
            for k in wanted[(asset, b)]:
                summary["errors"][k.label()] = err
            continue
        summary["baseline_diagnostics"][f"{asset}/{b}"] = res.baseline_audit[(asset, b)]
        summary["state"][asset] = res.state_audit[asset]
        for k in wanted[(asset, b)]:
            recs = res.cells[k]
            cell_records[k] = recs
            _write(out, f"records/{'__'.join(k)}.csv", records_to_csv(recs), files)
            summary["cells"][k.label()] = _summary_entry(recs, cfg.alpha)
            if k in res.selector_audit:
                selector_audit[k.label()] = res.selector_audit[k]
    if selector_audit:
        summary["selector_audit"] = selector_audit
    groups: Dict[Tuple[str, str, str], List[List[ForecastRecord]]] = {}
    for k, recs in cell_records.items():
        groups.setdefault((k.baseline, k.method, k.scenario), []).append(recs)
    for (b, m, sc), streams in sorted(groups.items()):
        pooled = pool_records(streams)
        summary["pooled"][f"{b}/{m}/{sc}"] = {**_summary_entry(pooled, cfg.alpha), "assets": len(streams)}
    _write(out, "summary.json", _json_bytes(_clean_json(summary)), files)
    echo = {"config": cfg.model_dump(mode="json"), "seed": cfg.seed, "cells": cells or "*"}
    _update_manifest(out, "backtest", echo, files)
    n = sum(len(r) for r in cell_records.values())
    print(f"wrote {len(cell_records)} cell(s), {n} records, to {out}")
    return EXIT_DATA if summary["errors"] else EXIT_OK


# --- report -------------------------------------------------------------------


def _csv_bytes(header: Sequence[str], rows) -> bytes:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    for row in rows:
        wr.writerow([repr(x) if isinstance(x, float) else ("" if x is None else x) for x in row])
    return buf.getvalue().encode()


def _fmt(x, spec=".4f") -> str:
    return "n/a" if x is None else format(x, spec)


def _markdown(summary: dict) -> str:
    pooled = summary["pooled"]
    keys = sorted(pooled)
    lines = ["# Backtest report", "", f"alpha = {summary['alpha']}, kappa = {summary['kappa']}", ""]
    lines += ["## Pooled exceedance and backtests", "",
              "| baseline | method | scenario | n | exceedance | UC p | CC p | DQ p | avg capital |",
              "|---|---|---|---|---|---|---|---|---|"]
    for k in keys:
        s = pooled[k]
        b, m, sc = k.split("/")
        dq = s["dq"]["pvalue"] if s.get("dq") else None
        lines.append(f"| {b} | {m} | {sc} | {s['n']} | {_fmt(s['exceedance'])} | {_fmt(s['uc']['pvalue'], '.3f')} | "
                     f"{_fmt(s['cc']['pvalue'], '.3f')} | {_fmt(dq, '.3f')} | {_fmt(s['avg_capital'], '.5f')} |")
    pairs = sorted({tuple(k.split("/")[:2]) for k in keys})
    lines += ["", "## Pooled strict-stress exceedance, clean vs underreacting proxy", "",
              "| baseline | method | strict n | clean | underreact | change |", "|---|---|---|---|---|---|"]
    for b, m in pairs:
        c, u = pooled.get(f"{b}/{m}/clean"), pooled.get(f"{b}/{m}/underreact")
        if not (c and u):
            continue
        ce, ue = c["strict_exceedance"], u["strict_exceedance"]
        ch = None if ce is None or ue is None else ue - ce
        lines.append(f"| {b} | {m} | {c['strict_count']} | {_fmt(ce)} | {_fmt(ue)} | {_fmt(ch, '+.4f')} |")
    lines += ["", "## Stress gap (strict-stress exceedance minus 0.05)", "",
              "| baseline | method | scenario | stress gap | stressed avg capital |", "|---|---|---|---|---|"]
    for k in keys:
        s = pooled[k]
        b, m, sc = k.split("/")
        lines.append(f"| {b} | {m} | {sc} | {_fmt(s['stress_gap'], '+.4f')} | {_fmt(s['stressed_avg_capital'], '.5f')} |")
    return "\n".join(lines) + "\n"


def cmd_report(run_dir: Path) -> int:
    """Plot-ready CSVs and a markdown summary from manifest-listed files."""
    man = _read_manifest(run_dir)
    listed = man.get("files", {})
    files: Dict[str, str] = {}
    if "summary.json" not in listed and "theory.json" not in listed:
        raise MissingRun(f"{run_dir} holds neither a backtest nor a theory run")
    if "summary.json" in listed:
        summary = json.loads((run_dir / "summary.json").read_text())
        pooled, cells = summary["pooled"], summary["cells"]
        bars = []
        for k in sorted(pooled):
            b, m, sc = k.split("/")
            s = pooled[k]
            bars.append((b, m, sc, s["n"], s["exceedance"], s["strict_exceedance"], s["strict_count"]))
        _write(run_dir, "report/exceedance_bars.csv",
               _csv_bytes(["baseline", "method", "scenario", "n", "exceedance", "strict_exceedance", "strict_count"], bars), files)
        parsed = {tuple(k.split("/")): v for k, v in cells.items()}
        methods = [m for m in ("base", "rho0", "rho1", "global_avg", "global_stress", "regime_avg", "regime_stress")
                   if any(k[2] == m for k in parsed)]
        for sc in sorted({k[3] for k in parsed}):
            rows = []
            for a, b in sorted({(k[0], k[1]) for k in parsed}):
                rows.append([a, b] + [parsed.get((a, b, m, sc), {}).get("exceedance") for m in methods])
            _write(run_dir, f"report/heatmap_{sc}.csv", _csv_bytes(["asset", "baseline", *methods], rows), files)
        pts = [(*k, v["exceedance"], v["avg_capital"], v["strict_exceedance"]) for k, v in sorted(parsed.items())]
        _write(run_dir, "report/scatter.csv",
               _csv_bytes(["asset", "baseline", "method", "scenario", "exceedance", "avg_capital", "strict_exceedance"], pts), files)
        _write(run_dir, "report/report.md", _markdown(summary).encode(), files)
    if "theory.json" in listed:
        th = json.loads((run_dir / "theory.json").read_text())
        rows = [(c["law"], c["a"], c["kappa"], c["rho"], c["delta"], c["se"], c["lower"], c["upper"]) for c in th["curves"]]
        _write(run_dir, "report/distortion_curves.csv",
               _csv_bytes(["law", "a", "kappa", "rho", "delta", "se", "lower", "upper"], rows), files)
    _update_manifest(run_dir, "report", {}, files)
    print(f"wrote {len(files)} report file(s) under {run_dir / 'report'}")
    return EXIT_OK


# --- theory -------------------------------------------------------------------


def cmd_verify_theory(seed: int = 0, out: Optional[Path] = None, quantile=lower_quantile) -> int:
    report = run_theory_suite(seed, quantile=quantile)
    sys.stdout.write(report.table())
    if out is not None:
        files: Dict[str, str] = {}
        _write(out, "theory.json", report.to_json().encode(), files)
        _write(out, "theory.txt", report.table().encode(), files)
        _update_manifest(out, "verify-theory", {"seed": seed}, files)
    return EXIT_OK if report.passed else EXIT_VERIFY


# --- argument parsing ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="varrecal", description="Proxy-reliance-controlled VaR recalibration backtests.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="TOML run configuration")
        sp.add_argument("--out", help="output directory (overrides config 'out')")
        if seed:
            sp.add_argument("--seed", type=int, help="override the configured seed")

    common(sub.add_parser("ingest", help="clean and cache input panels"))
    bt = sub.add_parser("backtest", help="run the walk-forward backtest")
    common(bt)
    bt.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    bt.add_argument("--cells", help="comma-separated globs over asset/baseline/method/scenario")
    rp = sub.add_parser("report", help="emit plot data and a markdown summary for a run")
    rp.add_argument("run_dir", nargs="?")
    rp.add_argument("--out", dest="run_dir_flag", help="run directory (same as the positional)")
    vt = sub.add_parser("verify-theory", help="run the theory verification suite")
    vt.add_argument("--seed", type=int, default=0)
    vt.add_argument("--out", help="write theory.json / theory.txt here")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "verify-theory":
            return cmd_verify_theory(args.seed, Path(args.out) if args.out else None)
        if args.command == "report":
            run_dir = args.run_dir or args.run_dir_flag
            if not run_dir:
                parser.error("report needs a run directory")
            return cmd_report(Path(run_dir))
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        cfg = load_config(args.config, overrides)
        out = Path(args.out or cfg.out)
        if args.command == "ingest":
            return cmd_ingest(cfg, out)
        if args.workers < 1:
            raise BadConfig("--workers must be at least 1")
        return cmd_backtest(cfg, out, args.workers, args.cells)
    except BadConfig as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    except (FileNotFoundError, IngestError, VarRecalError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
