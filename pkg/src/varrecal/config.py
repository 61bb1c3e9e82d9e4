"""Run configuration: a TOML file validated against a closed schema.

Unknown keys are rejected, every field has a default, and the validated
model is echoed verbatim into the run manifest.
"""
from __future__ import annotations

import sys
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .baselines import METHODS as BASELINES
from .engine import METHODS, SCENARIOS, RunSpec, WindowLayout
from .errors import BadConfig
from .selection import RHO_GRID, TUPLE_GRID, SelectorConfig
from .synth import SynthConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - depends on interpreter
    import tomli as tomllib


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class CsvSource(_Strict):
    assets: Dict[str, str] = Field(default_factory=dict, description="asset id -> OHLCV CSV path")
    vix: str = ""


class RemoteSource(_Strict):
    url_template: str = ""
    symbols: List[str] = Field(default_factory=list)
    vix_symbol: str = "VIX"
    cache_dir: str = "cache"


class SynthSource(_Strict):
    n_assets: int = 6
    length: int = 2700
    regime_vols: Tuple[float, ...] = (0.007, 0.012, 0.026)
    regime_drifts: Tuple[float, ...] = (0.0006, 0.0, -0.0025)
    transition: Tuple[Tuple[float, ...], ...] = SynthConfig().transition
    df: Optional[float] = 5.0
    vix_bias: float = 0.1
    vix_noise: float = 1.0
    start_date: str = "2015-01-02"

    def to_synth(self) -> SynthConfig:
        cfg = SynthConfig(**self.model_dump())
        cfg.validate()
        return cfg


class DataConfig(_Strict):
    source: Literal["csv", "synth", "remote", "panels"] = "synth"
    csv: CsvSource = CsvSource()
    remote: RemoteSource = RemoteSource()
    synth: SynthSource = SynthSource()
    panels_dir: str = ""
    garch_lookback: int = 252


class LayoutConfig(_Strict):
    train_len: int = 504
    fit_len: int = 84
    eval_len: int = 168
    calib_len: int = 126


class SelectorSection(_Strict):
    rho_grid: Tuple[float, ...] = RHO_GRID
    tuple_grid: Tuple[float, ...] = TUPLE_GRID
    tau_stress: float = 0.03
    tau_overall: float = 0.02
    w_pin: float = 1.0
    w_cap: float = 0.5
    penalty: float = 100.0
    lambda_smooth: float = 0.1
    min_stress_count: int = 10


class RunConfig(_Strict):
    data: DataConfig = DataConfig()
    assets: List[str] = Field(default_factory=list, description="subset of assets; empty means all")
    baselines: List[str] = Field(default_factory=lambda: ["HS"])
    methods: List[str] = Field(default_factory=lambda: list(METHODS))
    scenarios: List[str] = Field(default_factory=lambda: list(SCENARIOS))
    alpha: float = 0.05
    kappa: float = 0.4
    layout: LayoutConfig = LayoutConfig()
    selector: SelectorSection = SelectorSection()
    caviar_starts: int = 20
    seed: int = 0
    out: str = "run"

    @field_validator("baselines")
    @classmethod
    def _baselines(cls, v):
        bad = [b for b in v if b not in BASELINES]
        if bad:
            raise ValueError(f"unknown baselines {bad}; choose from {list(BASELINES)}")
        return v

    @field_validator("methods")
    @classmethod
    def _methods(cls, v):
        bad = [m for m in v if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}; choose from {list(METHODS)}")
        return v

    @field_validator("scenarios")
    @classmethod
    def _scenarios(cls, v):
        bad = [s for s in v if s not in SCENARIOS]
        if bad:
            raise ValueError(f"unknown scenarios {bad}; choose from {list(SCENARIOS)}")
        return v

    def run_spec(self, assets) -> RunSpec:
        lay = WindowLayout(**self.layout.model_dump())
        sel = SelectorConfig(alpha=self.alpha, **self.selector.model_dump())
        return RunSpec(
            assets=tuple(assets),
            baselines=tuple(self.baselines),
            methods=tuple(self.methods),
            scenarios=tuple(self.scenarios),
            alpha=self.alpha,
            kappa=self.kappa,
            layout=lay,
            selector=sel,
            seed=self.seed,
            caviar_starts=self.caviar_starts,
        )


def parse_config(text: str, overrides: Optional[dict] = None) -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise BadConfig(f"config is not valid TOML: {exc}") from exc
    raw.update(overrides or {})
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise BadConfig(str(exc)) from exc


def load_config(path: Optional[str], overrides: Optional[dict] = None) -> RunConfig:
    if path is None:
        return parse_config("", overrides)
    p = Path(path)
    if not p.is_file():
        raise BadConfig(f"config file not found: {p}")
    return parse_config(p.read_text(), overrides)
