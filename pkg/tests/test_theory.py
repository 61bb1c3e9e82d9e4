import mpmath as mp
import numpy as np
import pytest

from varrecal import theory as th
from varrecal.errors import BadDistribution
from varrecal.evaluation import distortion_curve, run_theory_suite
from varrecal.recalibration import lower_quantile
from varrecal.selection import RHO_GRID


def mp_gauss_delta(a, kappa, rho, alpha=0.05):
    mp.mp.dps = 40
    q = mp.sqrt(2) * mp.erfinv(2 * mp.mpf(alpha) - 1)
    return mp.ncdf(q + a * (1 - mp.mpf(kappa) ** rho)) - mp.mpf(alpha)


def test_anchor_value():
    cur = distortion_curve(th.conditional_law("gaussian"), 0.5, 0.4, [0.0, 1.0])
    assert cur.delta[0] == 0.0
    assert cur.delta[1] == pytest.approx(float(mp_gauss_delta(0.5, 0.4, 1)), abs=1e-12)
    assert cur.delta[1] == pytest.approx(0.0393363, abs=1e-6)


@pytest.mark.parametrize("a,kappa", [(0.25, 0.2), (1.0, 0.8), (0.5, 0.4)])
def test_gaussian_curve_matches_arbitrary_precision(a, kappa):
    cur = distortion_curve(th.conditional_law("gaussian"), a, kappa)
    ref = [float(mp_gauss_delta(a, kappa, r)) for r in RHO_GRID]
    np.testing.assert_allclose(cur.delta, ref, atol=1e-12)
    assert np.all(np.diff(cur.delta) > 0)


def test_kappa_to_one_vanishes():
    cur = distortion_curve(th.conditional_law("t", 5), 1.0, 1 - 1e-9)
    assert np.all(np.abs(cur.delta) < 1e-8)


def test_student_t_curve_bounds_and_monotone():
    cur = distortion_curve(th.conditional_law("t", 5), 0.5, 0.4)
    assert cur.delta[0] == 0.0
    assert np.all(np.diff(cur.delta) >= 0)
    assert np.all(cur.lower <= cur.delta) and np.all(cur.delta <= cur.upper)


def test_monte_carlo_curve_within_se():
    cur = distortion_curve(th.conditional_law("gaussian"), 0.5, 0.4, draws=100_000, seed=1)
    assert cur.mc_delta[0] == 0.0 and cur.se[0] == 0.0
    assert np.all(cur.se[1:] > 0)
    assert np.all(np.abs(cur.mc_delta - cur.delta)[1:] <= 4 * cur.se[1:])


def test_bad_inputs():
    with pytest.raises(BadDistribution):
        th.conditional_law("cauchy")
    with pytest.raises(BadDistribution):
        th.conditional_law("t")
    from scipy import stats

    with pytest.raises(BadDistribution):
        distortion_curve(stats.cauchy(), 0.5, 0.4)
    with pytest.raises(ValueError):
        distortion_curve(th.conditional_law("gaussian"), 0.0, 0.4)
    with pytest.raises(ValueError):
        distortion_curve(th.conditional_law("gaussian"), 0.5, 1.0)


def test_suite_passes_and_is_reproducible():
    a = run_theory_suite(0)
    assert a.passed, a.table()
    names = [c.name for c in a.checks]
    assert names == [
        "rescaling_invariance",
        "adjustment_elasticity",
        "contrast_monotone",
        "distortion_sign",
        "distortion_curves",
        "distortion_anchor",
        "distortion_monte_carlo",
        "heterogeneous_ordering",
        "screened_selector_monotone",
    ]
    assert a.to_json() == run_theory_suite(0).to_json()
    assert len(a.curves) == 18 * len(RHO_GRID)
    assert "overall: PASS" in a.table()


def test_suite_detects_broken_quantile():
    def shifted(sample, alpha):
        return lower_quantile(sample, alpha) + 1e-3  # not positively homogeneous

    rep = run_theory_suite(0, quantile=shifted)
    assert not rep.passed
    failed = {c.name for c in rep.checks if not c.passed}
    assert "rescaling_invariance" in failed
