"""Per-origin choice of the recalibration rule.

Candidates are calibrated on a fit block and scored on a later evaluation
block. Ties are always broken toward lower proxy reliance, comparing the
(low, mid, high) components lexicographically.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from itertools import combinations_with_replacement
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .errors import EmptyCandidates, EmptyGrid, EmptySample
from .recalibration import RecalRule, RegimeRule, ScalarRule, calibrate_many, proxy_power
from .state_model import HIGH

RHO_GRID = tuple(round(0.1 * i, 1) for i in range(11))
TUPLE_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class SelectorConfig:
    alpha: float = 0.05
    rho_grid: Tuple[float, ...] = RHO_GRID
    tuple_grid: Tuple[float, ...] = TUPLE_GRID
    tau_stress: float = 0.03
    tau_overall: float = 0.02
    w_pin: float = 1.0
    w_cap: float = 0.5
    penalty: float = 100.0
    lambda_smooth: float = 0.1
    min_stress_count: int = 10

    def __post_init__(self):
        if not self.rho_grid or not self.tuple_grid:
            raise EmptyGrid("selector grids must be nonempty")
        if self.tau_stress < 0 or self.tau_overall < 0:
            raise ValueError("tolerances must be nonnegative")


class Block(NamedTuple):
    """Aligned arrays for a contiguous block of dates."""

    y: np.ndarray
    q: np.ndarray
    v: np.ndarray
    g: Optional[np.ndarray] = None


@dataclass(frozen=True)
class CandidateEvaluation:
    rule: RecalRule
    c: float
    avg_capital: float
    overall_exceed: float
    stress_exceed: float
    stress_pinball: float
    stress_count: int
    feasible: bool = True
    objective: float = 0.0


def rule_key(rule: RecalRule) -> Tuple[float, float, float]:
    return rule.components


def _exponent_matrix(rules: Sequence[RecalRule], g, n: int) -> np.ndarray:
    if all(isinstance(r, ScalarRule) for r in rules):
        return np.repeat(np.array([[r.rho] for r in rules]), n, axis=1)
    return np.vstack([r.exponents(g, n) for r in rules])


def evaluate_candidates(rules: Sequence[RecalRule], fit: Block, ev: Block, stress_flags, alpha: float) -> List[CandidateEvaluation]:
    """Calibrate every rule on ``fit`` and score it on ``ev``.

    ``stress_flags`` marks the evaluation dates used for the stress metrics;
    when none are flagged the stress metrics are 0 with ``stress_count`` 0.
    """
    if not rules:
        raise EmptyCandidates("no candidate rules")
    if len(fit.y) == 0 or len(ev.y) == 0:
        raise EmptySample("fit and evaluation blocks must be nonempty")
    c = calibrate_many(_exponent_matrix(rules, fit.g, len(fit.y)), fit.y, fit.q, fit.v, alpha)
    adj = ev.q + c[:, None] * proxy_power(ev.v, _exponent_matrix(rules, ev.g, len(ev.y)))
    hits = ev.y <= adj
    capital = np.maximum(-adj, 0.0).mean(axis=1)
    overall = hits.mean(axis=1)
    flags = np.asarray(stress_flags, dtype=bool)
    n_stress = int(flags.sum())
    if n_stress:
        d = ev.y[flags] - adj[:, flags]
        s_exc = hits[:, flags].mean(axis=1)
        s_pin = ((alpha - (d < 0)) * d).mean(axis=1)
    else:
        s_exc = s_pin = np.zeros(len(rules))
    return [
        CandidateEvaluation(rule, float(c[i]), float(capital[i]), float(overall[i]), float(s_exc[i]), float(s_pin[i]), n_stress, True, float(capital[i]))
        for i, rule in enumerate(rules)
    ]


def evaluate_candidate(rule: RecalRule, fit: Block, ev: Block, stress_flags, alpha: float) -> CandidateEvaluation:
    return evaluate_candidates([rule], fit, ev, stress_flags, alpha)[0]


def _argmin(cands: Sequence[CandidateEvaluation]) -> CandidateEvaluation:
    if not cands:
        raise EmptyCandidates("no candidates to select from")
    return min(cands, key=lambda e: (e.objective, rule_key(e.rule)))


def select_global_avg(candidates: Sequence[CandidateEvaluation]) -> RecalRule:
    """Lowest average capital; ties go to the smallest rho."""
    return _argmin([replace(e, objective=e.avg_capital) for e in candidates]).rule


def screen(candidates: Sequence[CandidateEvaluation], config: SelectorConfig) -> List[CandidateEvaluation]:
    """Mark feasibility and attach the stress-aware objective.

    Feasible: stress exceedance within ``alpha + tau_stress`` and overall
    exceedance within ``tau_overall`` of alpha, with a nonempty stress subset.
    When nothing is feasible the objective carries a penalty proportional to
    the tolerance violations.
    """
    a = config.alpha
    scored = []
    for e in candidates:
        s_viol = max(0.0, e.stress_exceed - a - config.tau_stress)
        o_viol = max(0.0, abs(e.overall_exceed - a) - config.tau_overall)
        feasible = e.stress_count > 0 and s_viol == 0.0 and o_viol == 0.0
        base = config.w_pin * e.stress_pinball + config.w_cap * e.avg_capital
        scored.append(replace(e, feasible=feasible, objective=base))
    if not any(e.feasible for e in scored):
        scored = [
            replace(
                e,
                objective=e.objective
                + config.penalty
                * (max(0.0, e.stress_exceed - a - config.tau_stress) + max(0.0, abs(e.overall_exceed - a) - config.tau_overall)),
            )
            for e in scored
        ]
    return scored


def _stress_select(candidates, config) -> RecalRule:
    scored = screen(candidates, config)
    feasible = [e for e in scored if e.feasible]
    return _argmin(feasible or scored).rule


def select_global_stress(candidates: Sequence[CandidateEvaluation], config: SelectorConfig) -> RecalRule:
    if not candidates:
        raise EmptyCandidates("no candidates to select from")
    return _stress_select(candidates, config)


def enumerate_monotone_tuples(component_grid: Sequence[float]) -> List[RegimeRule]:
    """All (low, mid, high) from the grid with low >= mid >= high."""
    grid = sorted(set(float(x) for x in component_grid))
    if not grid:
        raise EmptyGrid("component grid is empty")
    rules = [RegimeRule(*sorted(c, reverse=True)) for c in combinations_with_replacement(grid, 3)]
    return sorted(rules, key=rule_key)


def smoothness(rule: RegimeRule) -> float:
    return (rule.low - rule.mid) ** 2 + (rule.mid - rule.high) ** 2


def select_regime(candidates: Sequence[CandidateEvaluation], mode: str, config: SelectorConfig) -> RecalRule:
    """Regime-tuple selection.

    ``average``: capital plus a quadratic smoothness penalty across adjacent
    regimes. ``stress``: the global stress logic, with candidates scored on
    the high-regime subset (see ``regime_stress_subset``).
    """
    if not candidates:
        raise EmptyCandidates("no candidates to select from")
    if mode == "average":
        return _argmin([replace(e, objective=e.avg_capital + config.lambda_smooth * smoothness(e.rule)) for e in candidates]).rule
    if mode == "stress":
        return _stress_select(candidates, config)
    raise ValueError(f"unknown regime selection mode {mode!r}")


def regime_stress_subset(eval_regimes, selection_flags) -> Tuple[np.ndarray, str]:
    """High-regime dates of the evaluation block, else the selection-stress flags."""
    high = np.asarray(eval_regimes) == HIGH
    if high.any():
        return high, "high_regime"
    return np.asarray(selection_flags, dtype=bool), "selection_stress"


def screened_selector(rho_grid, delta_bar, capital_bar, tau: float):
    """Idealized capital-only screened selector, kept as a theory oracle.

    Feasible set: ``delta_bar(rho) <= tau``. Among feasible candidates the
    capital minimizer is taken, resolving ties toward the largest rho.
    Returns ``(rho or None, feasible_mask)``.
    """
    rho = np.asarray(rho_grid, dtype=float)
    feas = np.asarray(delta_bar, dtype=float) <= tau
    if not feas.any():
        return None, feas
    cap = np.asarray(capital_bar, dtype=float)
    idx = np.flatnonzero(feas)
    best = min(idx, key=lambda i: (cap[i], -rho[i]))
    return float(rho[best]), feas
