import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import expit

from conftest import dataset
from smarttmle.data import REGIMES
from smarttmle.propensity import (
    CensoringModel,
    PropensityError,
    PropensityFits,
    StageOnePropensity,
    estimate_gA0,
    estimate_gA1,
    estimate_gC,
    fit_propensities,
    regime_propensities,
    regime_propensity,
)
from smarttmle.simulation import SimParams, simulate_trial


def row(a0, y0, y1, a1, w0=0.0, c=(1, 1, 1)):
    c1, c2, c3 = c
    return (a0, y0, c1, y1, a1, c2, 1, c3, 1, w0)


@pytest.fixture
def thirty():
    # 24 step-up eligible text attendees, 12 of whom stepped up, plus 6 others
    rows = [row(1, 1, 2, 3) for _ in range(12)] + [row(1, 1, 2, 1) for _ in range(12)]
    rows += [row(1, 3, 1, 1), row(1, 2, 0, 1), row(0, 1, 2, 0), row(0, 0, 0, 0), row(2, 1, 1, 3),
             row(2, 1, 0, 2)]
    return dataset(rows)


def test_gA0_examples():
    rows = [row(1, 0, 0, 1)] * 33 + [row(0, 0, 0, 0)] * 34 + [row(2, 0, 0, 2)] * 33
    d = dataset(rows)
    assert estimate_gA0(d, "II") == 0.33
    assert sum(estimate_gA0(d, r) for r in ("I", "II", "III")) == 1.0
    with pytest.raises(PropensityError):
        estimate_gA0(dataset([row(0, 0, 0, 0)] * 5), "II")


def test_gA0_balanced():
    d = simulate_trial(SimParams(n=30000), seed=1)
    assert abs(estimate_gA0(d, "II") - 1 / 3) < 0.01


def test_gA1_examples(thirty):
    g = estimate_gA1(thirty, "II")
    assert g(1, 2) == 0.5
    assert g(3, 1) == 1.0
    assert g(2, 0) == 1.0
    assert estimate_gA1(thirty, "IIA")(1, 2) == 0.5
    # the single eligible webapp attendee stepped up
    assert estimate_gA1(thirty, "III")(1, 1) == 1.0
    assert np.all(estimate_gA1(thirty, "I")(np.arange(5), np.arange(5)[::-1]) == 1.0)


def test_gA1_staying_probability():
    rows = [row(1, 1, 2, 3) for _ in range(6)] + [row(1, 0, 1, 1) for _ in range(18)]
    d = dataset(rows)
    assert estimate_gA1(d, "II")(1, 2) == 0.25
    assert estimate_gA1(d, "IIA")(1, 2) == 0.75
    assert estimate_gA1(d, "IIA")(2, 1) == 1.0


def test_gA1_requires_eligible_subjects():
    d = dataset([row(1, 3, 1, 1)] * 4 + [row(0, 0, 0, 0)] * 4)
    with pytest.raises(PropensityError):
        estimate_gA1(d, "II")


@given(st.floats(0.01, 0.99), st.integers(1, 2), st.integers(0, 30), st.integers(0, 30))
def test_gA1_is_exactly_one_when_ineligible(p, arm, y0, y1):
    g = StageOnePropensity(p, arm)(y0, y1)
    if y1 < y0 or y1 == 0:
        assert g == 1.0
    else:
        assert g == p


def test_gC_constant_without_missingness(sim_data):
    d = dataset([row(i % 3, 1, 1, i % 3) for i in range(12)])
    m = estimate_gC(d, 1)
    assert np.all(m.predict(d, d.a0) >= 1 - 1e-6)


def test_gC_matches_dgp():
    d = simulate_trial(SimParams(n=5000, alpha0=-4.06), seed=2)
    m = estimate_gC(d, 1)
    assert abs(m.predict(d, d.a0).mean() - (1 - expit(-4.06))) < 0.01
    assert m.columns == ("a0_text", "a0_webapp", "w0", "y0")


def test_gC_separation_is_flagged_and_truncated():
    # w0 alone determines attendance at visit 1
    rows = [row(1, 1, 2, 1, w0=1.0) for _ in range(20)]
    rows += [row(1, 1, 2, 1, w0=0.0, c=(0, 0, 0)) for _ in range(2)]
    rows += [row(1, 1, 2, 3, w0=1.0) for _ in range(5)]
    d = dataset(rows)
    m = estimate_gC(d, 1)
    assert m.separated
    fits = fit_propensities(d, "IIA")
    g = regime_propensities(fits, d)
    assert np.all(g[:, 0] >= fits.gA0 * 0.01 - 1e-15)


def _constant_fits(regime, gA0, gA1, c):
    models = tuple(CensoringModel(t + 1, None, np.arange(0), constant=c[t]) for t in range(3))
    return PropensityFits(REGIMES[regime], gA0, gA1, models)


def test_product_at_stage_one():
    d = dataset([row(1, 1, 2, 3)] * 3)
    fits = _constant_fits("II", 1 / 3, StageOnePropensity(0.5, 1), (0.95, 1.0, 1.0))
    assert regime_propensity(fits, d.record(0), "II", 1) == pytest.approx(0.31666666666666665, abs=1e-15)


def test_full_product_hand_fixture():
    rows = [row(1, 1, 2, 3), row(1, 1, 2, 1), row(1, 3, 1, 1), row(1, 0, 0, 1), row(0, 2, 2, 0),
            row(2, 1, 1, 3)]
    d = dataset(rows)
    fits = _constant_fits("II", 0.4, StageOnePropensity(0.6, 1), (0.9, 0.8, 0.7))
    g = regime_propensities(fits, d)
    base = 0.4 * 0.9
    # evaluated at the regime's arm (text) for every subject, whatever arm they were given
    expected_gA1 = np.array([0.6, 0.6, 1.0, 1.0, 0.6, 0.6])
    np.testing.assert_allclose(g[:, 0], base, atol=1e-12, rtol=0)
    np.testing.assert_allclose(g[:, 1], base * expected_gA1 * 0.8, atol=1e-12, rtol=0)
    np.testing.assert_allclose(g[:, 2], base * expected_gA1 * 0.8 * 0.7, atol=1e-12, rtol=0)
    # control regime: no stage-1 factor
    gi = regime_propensities(_constant_fits("I", 0.4, StageOnePropensity(1.0, 0, False), (0.9, 0.8, 0.7)), d)
    np.testing.assert_allclose(gi[:, 2], 0.4 * 0.9 * 0.8 * 0.7, atol=1e-12, rtol=0)


def test_truncation_per_factor():
    d = dataset([row(1, 1, 2, 3)] * 3)
    fits = PropensityFits(REGIMES["II"], 0.001, StageOnePropensity(0.5, 1), _constant_fits(
        "II", 1, None, (0.5, 1, 1)).gC, delta_g=0.01)
    assert regime_propensity(fits, d.record(0), "II", 1) == pytest.approx(0.01 * 0.5)


def test_missing_history_is_nan_and_rejected():
    d = dataset([row(1, 1, 2, 3), row(1, 1, 2, 3, c=(0, 0, 0))] * 4)
    fits = fit_propensities(d, "II")
    g = regime_propensities(fits, d)
    assert np.isnan(g[1, 1]) and np.isnan(g[1, 2]) and np.isfinite(g[1, 0])
    with pytest.raises(PropensityError):
        regime_propensity(fits, d.record(1), "II", 2)


@pytest.mark.parametrize("label", sorted(REGIMES))
def test_propensity_nonincreasing_and_bounded(sim_data, label):
    fits = fit_propensities(sim_data, label)
    g = regime_propensities(fits, sim_data)
    assert np.all(g[~np.isnan(g)] <= 1) and np.all(g[~np.isnan(g)] > 0)
    with np.errstate(invalid="ignore"):
        assert not np.any(g[:, 1] > g[:, 0] + 1e-15)
        assert not np.any(g[:, 2] > g[:, 1] + 1e-15)
