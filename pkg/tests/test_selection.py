import itertools
import math
import random

import numpy as np
import pytest

from varrecal import selection as sel
from varrecal.errors import EmptyCandidates, EmptyGrid
from varrecal.recalibration import RegimeRule, ScalarRule
from varrecal.selection import Block, CandidateEvaluation, SelectorConfig
from varrecal.state_model import HIGH, LOW, MID

ALPHA = 0.05
CFG = SelectorConfig()


def cand(rule, capital=0.02, overall=0.05, s_exc=0.05, s_pin=0.001, count=20):
    if not isinstance(rule, (ScalarRule, RegimeRule)):
        rule = ScalarRule(rule)
    return CandidateEvaluation(rule, -1.0, capital, overall, s_exc, s_pin, count)


# --- evaluate_candidates ----------------------------------------------------------


def test_calibrated_iid_exceedance_near_alpha():
    rng = np.random.default_rng(0)
    y = rng.normal(size=20_000)
    fit = Block(y[:10_000], np.full(10_000, -1.6448536), np.ones(10_000))
    ev = Block(y[10_000:], np.full(10_000, -1.6448536), np.ones(10_000))
    e = sel.evaluate_candidate(ScalarRule(0.5), fit, ev, np.zeros(10_000, bool), ALPHA)
    assert abs(e.overall_exceed - ALPHA) < 4 * math.sqrt(ALPHA * (1 - ALPHA) / 10_000)
    assert abs(e.c) < 0.1


def test_no_breach_pinball():
    fit = Block(np.zeros(20), np.zeros(20), np.ones(20))  # c = 0
    y = np.linspace(0.01, 0.05, 10)
    q = np.full(10, -0.02)
    e = sel.evaluate_candidate(ScalarRule(0.3), fit, Block(y, q, np.ones(10)), np.ones(10, bool), ALPHA)
    assert e.overall_exceed == 0 and e.stress_exceed == 0
    assert e.stress_pinball == pytest.approx(np.sum(ALPHA * (y - q)) / 10, rel=1e-14)
    assert e.avg_capital == pytest.approx(0.02, rel=1e-14)


def test_identical_forecasts_identical_metrics():
    rng = np.random.default_rng(1)
    fit = Block(rng.normal(size=30), np.zeros(30), np.ones(30))  # v = 1: every rho gives the same forecast
    ev = Block(rng.normal(size=15), np.zeros(15), np.ones(15))
    flags = rng.random(15) < 0.5
    a, b = sel.evaluate_candidates([ScalarRule(0.2), ScalarRule(0.9)], fit, ev, flags, ALPHA)
    assert (a.c, a.avg_capital, a.overall_exceed, a.stress_exceed, a.stress_pinball) == (
        b.c,
        b.avg_capital,
        b.overall_exceed,
        b.stress_exceed,
        b.stress_pinball,
    )


def test_evaluate_regime_rules_uses_labels():
    rng = np.random.default_rng(2)
    g = rng.integers(0, 3, 40)
    fit = Block(rng.normal(size=40), np.zeros(40), rng.uniform(0.5, 2, 40), g)
    ev = Block(rng.normal(size=10), np.zeros(10), rng.uniform(0.5, 2, 10), g[:10])
    rule = RegimeRule(1.0, 0.5, 0.0)
    e = sel.evaluate_candidate(rule, fit, ev, np.zeros(10, bool), ALPHA)
    from varrecal.recalibration import apply, calibrate

    cal = calibrate(rule, fit.y, fit.q, fit.v, ALPHA, fit.g)
    assert e.c == cal.c
    adj = apply(cal, ev.q, ev.v, ev.g)
    assert e.avg_capital == pytest.approx(np.maximum(-adj, 0).mean(), rel=1e-14)


def test_evaluate_empty_rules():
    with pytest.raises(EmptyCandidates):
        sel.evaluate_candidates([], Block(np.zeros(1), np.zeros(1), np.ones(1)), Block(np.zeros(1), np.zeros(1), np.ones(1)), [False], ALPHA)


# --- global selectors -------------------------------------------------------------


def test_global_avg_examples():
    cs = [cand(0.0, 0.03), cand(0.5, 0.02), cand(1.0, 0.025)]
    assert sel.select_global_avg(cs) == ScalarRule(0.5)
    assert sel.select_global_avg([cand(r, 0.02) for r in (1.0, 0.3, 0.0)]) == ScalarRule(0.0)
    assert sel.select_global_avg([cand(0.7)]) == ScalarRule(0.7)
    with pytest.raises(EmptyCandidates):
        sel.select_global_avg([])


def test_global_avg_permutation_invariant():
    rng = random.Random(3)
    cs = [cand(r, round(rng.uniform(0.01, 0.03), 3)) for r in sel.RHO_GRID]
    picks = set()
    for _ in range(20):
        rng.shuffle(cs)
        picks.add(sel.select_global_avg(cs))
    assert len(picks) == 1


def test_global_stress_single_feasible_wins():
    cs = [
        cand(0.0, capital=0.001, s_pin=0.0, s_exc=0.2),
        cand(0.5, capital=0.05, s_pin=0.01, s_exc=0.06),
        cand(1.0, capital=0.001, s_pin=0.0, overall=0.2),
    ]
    assert sel.select_global_stress(cs, CFG) == ScalarRule(0.5)


def test_global_stress_penalized_when_none_feasible():
    a = cand(0.0, capital=0.001, s_pin=0.0, s_exc=0.30)  # violation 0.22
    b = cand(1.0, capital=0.04, s_pin=0.004, s_exc=0.09)  # violation 0.01
    obj_a = CFG.w_pin * 0.0 + CFG.w_cap * 0.001 + CFG.penalty * (0.30 - 0.05 - 0.03)
    obj_b = CFG.w_pin * 0.004 + CFG.w_cap * 0.04 + CFG.penalty * (0.09 - 0.05 - 0.03)
    assert obj_b < obj_a
    scored = sel.screen([a, b], CFG)
    assert [s.objective for s in scored] == pytest.approx([obj_a, obj_b], rel=1e-12)
    assert sel.select_global_stress([a, b], CFG) == ScalarRule(1.0)


def test_global_stress_ties_go_to_smallest_rho():
    assert sel.select_global_stress([cand(r) for r in (0.9, 0.4, 0.6)], CFG) == ScalarRule(0.4)


def test_empty_stress_subset_is_infeasible():
    scored = sel.screen([cand(0.3, count=0, s_exc=0.0, s_pin=0.0)], CFG)
    assert not scored[0].feasible


# --- regime selection -------------------------------------------------------------


def test_monotone_tuple_enumeration():
    assert [r.components for r in sel.enumerate_monotone_tuples([0, 1])] == [(0, 0, 0), (1, 0, 0), (1, 1, 0), (1, 1, 1)]
    assert len(sel.enumerate_monotone_tuples(sel.TUPLE_GRID)) == 35
    assert len(sel.enumerate_monotone_tuples([0.5])) == 1
    for g in range(1, 8):
        assert len(sel.enumerate_monotone_tuples(np.linspace(0, 1, g))) == math.comb(g + 2, 3)
    with pytest.raises(EmptyGrid):
        sel.enumerate_monotone_tuples([])


def test_regime_average_examples():
    tuples = sel.enumerate_monotone_tuples(sel.TUPLE_GRID)
    assert sel.select_regime([cand(t, 0.02) for t in tuples], "average", CFG).components == (0, 0, 0)
    cs = [cand(t, 0.019 if t.components == (1, 1, 1) else 0.02) for t in tuples]
    assert sel.select_regime(cs, "average", CFG).components == (1, 1, 1)
    # a rough tuple needs to beat the smooth ones by more than its penalty
    rough = RegimeRule(1.0, 0.0, 0.0)
    # its penalty is lambda_smooth * (1 + 0) = 0.1
    cs = [cand(t, 0.2 - (0.11 if t == rough else 0.0)) for t in tuples]
    assert sel.select_regime(cs, "average", CFG) == rough
    cs = [cand(t, 0.2 - (0.09 if t == rough else 0.0)) for t in tuples]
    assert sel.select_regime(cs, "average", CFG).components == (0, 0, 0)


def test_regime_stress_subset_fallback():
    flags = np.array([True, False, True])
    mask, src = sel.regime_stress_subset(np.array([LOW, HIGH, MID]), flags)
    assert src == "high_regime" and mask.tolist() == [False, True, False]
    mask, src = sel.regime_stress_subset(np.array([LOW, MID, MID]), flags)
    assert src == "selection_stress" and mask.tolist() == flags.tolist()


def test_regime_stress_with_empty_subset_uses_penalty():
    tuples = sel.enumerate_monotone_tuples([0.0, 1.0])
    cs = [cand(t, capital=0.02 - 0.001 * i, overall=0.05 + 0.03 * i, s_exc=0.0, s_pin=0.0, count=0) for i, t in enumerate(tuples)]
    # nobody feasible; only the first stays within the overall tolerance
    pick = sel.select_regime(cs, "stress", CFG)
    assert pick == tuples[0]


def test_regime_unknown_mode():
    with pytest.raises(ValueError):
        sel.select_regime([cand(RegimeRule(0, 0, 0))], "median", CFG)


# --- screened-selector oracle -----------------------------------------------------


def _monotone_curves(rng, n):
    delta = np.cumsum(rng.uniform(0, 0.02, n))
    cap = np.cumsum(rng.uniform(0, 0.01, n))[::-1]
    return delta, cap


def test_screened_selector_monotone_in_tau_and_prefix():
    rng = np.random.default_rng(7)
    grid = np.array(sel.RHO_GRID)
    for _ in range(300):
        delta, cap = _monotone_curves(rng, grid.size)
        taus = np.sort(rng.uniform(-0.01, delta.max() + 0.01, 10))
        picks = []
        for tau in taus:
            rho, feas = sel.screened_selector(grid, delta, cap, tau)
            k = int(feas.sum())
            assert feas[:k].all() and not feas[k:].any()
            picks.append(-1.0 if rho is None else rho)
        assert all(b >= a for a, b in zip(picks, picks[1:]))


def test_screened_selector_infeasible():
    rho, feas = sel.screened_selector([0, 0.5, 1], [0.2, 0.3, 0.4], [3, 2, 1], 0.1)
    assert rho is None and not feas.any()


def test_selector_config_validation():
    with pytest.raises(EmptyGrid):
        SelectorConfig(rho_grid=())
    with pytest.raises(ValueError):
        SelectorConfig(tau_stress=-0.1)


def test_selection_deterministic():
    cs = [cand(r, capital=0.02, s_pin=0.001 * (r * 10 % 3)) for r in sel.RHO_GRID]
    assert len({sel.select_global_stress(list(p), CFG) for p in itertools.islice(itertools.permutations(cs), 50)}) == 1
