import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import dataset
from oracles import gcomp_plugin, saturated_world
from smarttmle.data import REGIMES, from_arrays
from smarttmle.inference import contrast_test, standard_error
from smarttmle.propensity import fit_propensities
from smarttmle.simulation import SimParams, simulate_trial
from smarttmle.tmle import (
    STACK_BLOCKS,
    SmartTMLE,
    TmleConfig,
    TmleError,
    build_stacked_dataset,
    clever_covariate,
    clever_covariates,
    estimate_regime_mean,
    estimate_regimes,
    fluctuate,
)

GLM = TmleConfig(learner="glm")


@pytest.fixture(scope="module")
def world():
    return saturated_world()


@pytest.mark.parametrize("label", sorted(REGIMES))
def test_saturated_fit_equals_gcomputation(world, label):
    fit = estimate_regime_mean(world, label, TmleConfig(learner="saturated"))
    assert abs(fit.psi - gcomp_plugin(world, REGIMES[label])) <= 1e-10


def test_stacked_layout():
    d = dataset([(1, 1, 1, 3, 3, 1, 0, 1, 0), (0, 2, 1, 1, 0, 1, 1, 1, 1)])
    st = build_stacked_dataset(d, 2, lambda a0, a1, i: np.zeros(len(a0)), "II")
    assert len(st) == 10
    np.testing.assert_array_equal(st.a0, np.repeat([1, 2, 1, 2, 0], 2))
    assert st.a1[0] == 3  # d(1, 1, 3) = 3
    assert [b[0] for b in STACK_BLOCKS] == [1, 2, 1, 2, 0]
    # the fit rows reproduce each subject's observed arms exactly once
    np.testing.assert_array_equal(np.sort(st.subject[st.fit_mask]), [0, 1])
    for r in np.flatnonzero(st.fit_mask):
        s = st.subject[r]
        assert (st.a0[r], st.a1[r]) == (d.a0[s], d.a1[s])


def test_stage_one_pseudo_outcome():
    d = dataset([(0, 0, 1, 2, 0, 1, 1, 1, 1), (1, 1, 1, 3, 3, 1, 0, 1, 0)])
    def ev(a0, a1, idx):
        return 10 * a0 + a1

    st = build_stacked_dataset(d, 1, ev, "II")
    # subject 0 in the control block: Y1 + Q2(0, 0, history)
    row = np.flatnonzero((st.subject == 0) & (st.block == 4))[0]
    assert st.pseudo[row] == 2 + 0
    # subject 1 in the text step-up block: Y1 + Q2(1, d(1,1,3)=3)
    row = np.flatnonzero((st.subject == 1) & (st.block == 0))[0]
    assert st.pseudo[row] == 3 + 13
    assert st.fit_mask[row] and not st.fit_mask[np.flatnonzero((st.subject == 1) & (st.block == 2))[0]]


def test_clever_covariate_examples(sim_data):
    fits = fit_propensities(sim_data, "II")
    H, inv_g, follow, _, g = clever_covariates(fits, sim_data)
    censored = np.flatnonzero(sim_data.c1 == 0)
    assert censored.size and np.all(H[censored] == 0)
    for i in np.flatnonzero(follow[:, 1])[:5]:
        assert clever_covariate(fits, sim_data.record(i), "II", 2) == pytest.approx(1 / g[i, 1], rel=1e-12)
    i = int(censored[0])
    assert clever_covariate(fits, sim_data.record(i), "II", 1) == 0.0


def test_clever_covariate_reciprocal():
    from smarttmle.propensity import CensoringModel, PropensityFits, StageOnePropensity

    d = dataset([(1, 1, 1, 2, 3, 1, 1, 1, 1)] * 2)
    gc = tuple(CensoringModel(t + 1, None, np.arange(0), constant=1.0) for t in range(3))
    fits = PropensityFits(REGIMES["II"], 0.5, StageOnePropensity(0.5, 1), gc)
    assert clever_covariate(fits, d.record(0), "II", 2) == 4.0


def test_fluctuation_degenerate_and_already_solved():
    q = np.array([0.2, 0.5, 0.7])
    fl = fluctuate(q, np.zeros(3), [0.3, 0.4, 0.9], 1.0)
    assert fl.eps == 0 and fl.degenerate
    np.testing.assert_array_equal(fl.evaluate(q, np.zeros(3)), q)
    # H constant and mean(y) equal to mean(q) on the logit scale: score already zero
    H = np.ones(4)
    q = np.full(4, 0.4)
    fl = fluctuate(q, H, [0.2, 0.6, 0.3, 0.5], 1.0)
    assert abs(fl.eps) <= 1e-6


def test_fluctuation_solves_weighted_residual():
    rng = np.random.default_rng(0)
    q = rng.uniform(0.5, 4.0, 20)
    y = rng.poisson(2.0, 20).astype(float)
    H = rng.choice([0.0, 2.0, 3.5], 20)
    s = max(y.max(), 1.0)
    fl = fluctuate(q, H, y, s)
    assert fl.converged
    assert abs(np.sum(H * (y - fl.evaluate(q, H)))) <= 1e-8


def test_fluctuation_rejects_out_of_range():
    with pytest.raises(ValueError):
        fluctuate(np.ones(2), np.ones(2), [0, 3], 2.0)


def test_intercept_learner_no_censoring_control_mean():
    d = simulate_trial(SimParams(n=300, alpha0=-40), seed=4)
    assert d.c3.all()
    fit = estimate_regime_mean(d, "I", TmleConfig(learner="intercept"))
    m = d.a0 == 0
    assert abs(fit.psi - d.cumulative_y[m].mean()) <= 1e-8


def test_fit_invariants(sim_data):
    fits = estimate_regimes(sim_data, sorted(REGIMES), GLM)
    for label, f in fits.items():
        assert np.max(np.abs(f.diagnostics["ee_residuals"])) <= 1e-8
        assert abs(f.D[:, 0].mean()) <= 1e-12
        assert abs(f.influence.mean()) <= 1e-6
        assert 0 <= f.psi <= f.stages[0].scale
        # targeted next-stage values minus their cumulative addends stay inside [0, s_t]
        i1 = np.isfinite(f.Qbar[:, 1])
        inc2 = f.Qbar[i1, 1] - sim_data.y1[i1]
        assert np.all(inc2 >= 0) and np.all(inc2 <= f.stages[1].scale)
        i2 = np.isfinite(f.Qbar[:, 2])
        inc3 = f.Qbar[i2, 2] - sim_data.y1[i2] - sim_data.y2[i2]
        assert np.all(inc3 >= 0) and np.all(inc3 <= f.stages[2].scale)
        # censored-at-visit-1 subjects contribute nothing beyond D0
        c0 = sim_data.c1 == 0
        assert np.all(f.D[c0, 1:] == 0)
        rep = f.report()
        assert rep["regime"] == label and len(rep["eps"]) == 3


def test_shared_fits_match_separate_fits(sim_data):
    joint = estimate_regimes(sim_data, ["II", "IIIA"], GLM)
    for label in ("II", "IIIA"):
        assert joint[label].psi == pytest.approx(estimate_regime_mean(sim_data, label, GLM).psi, abs=1e-12)


def _relabel(data):
    swap = {0.0: 0.0, 1.0: 2.0, 2.0: 1.0, 3.0: 3.0}
    cols = {c: getattr(data, c) for c in ("w0", "y0", "c1", "w1", "y1", "c2", "w2", "y2", "c3", "y3")}
    cols["a0"] = np.array([swap[a] for a in data.a0])
    cols["a1"] = np.array([np.nan if np.isnan(a) else swap[a] for a in data.a1])
    return from_arrays(list(data.ids), **cols)


@pytest.mark.parametrize("label, twin", [("II", "III"), ("IIA", "IIIA"), ("I", "I")])
def test_arm_relabeling_invariance(sim_data, label, twin):
    a = estimate_regime_mean(sim_data, label, GLM).psi
    b = estimate_regime_mean(_relabel(sim_data), twin, GLM).psi
    assert abs(a - b) <= 1e-10
    moved = REGIMES[label].relabel({0: 0, 1: 2, 2: 1, 3: 3})
    assert (moved.stage0_arm, moved.stage1_policy) == (REGIMES[twin].stage0_arm, REGIMES[twin].stage1_policy)


@settings(max_examples=15)
@given(st.integers(0, 10**6), st.sampled_from([-4.06, -3.35, -2.5]), st.sampled_from(sorted(REGIMES)))
def test_estimating_equations_property(seed, alpha0, label):
    d = simulate_trial(SimParams(n=150, gamma1=-0.2, gamma3=-0.4, alpha0=alpha0), seed=seed)
    try:
        f = estimate_regime_mean(d, label, GLM)
    except TmleError:
        return
    assert np.max(np.abs(f.diagnostics["ee_residuals"])) <= 1e-8
    assert 0 <= f.psi <= f.stages[0].scale


def test_superlearner_initial_fits(sim_data):
    f = estimate_regime_mean(sim_data, "II", TmleConfig(learner="superlearner", sl_hal=False))
    assert np.max(np.abs(f.diagnostics["ee_residuals"])) <= 1e-8
    g = estimate_regime_mean(sim_data, "II", GLM)
    assert abs(f.psi - g.psi) < 1.0


@pytest.mark.slow
def test_superlearner_with_hal(sim_data):
    f = estimate_regime_mean(sim_data, "III", TmleConfig(learner="superlearner"))
    assert np.max(np.abs(f.diagnostics["ee_residuals"])) <= 1e-8


def test_null_difference_within_three_tau():
    d = simulate_trial(SimParams(n=2000), seed=21)
    fits = estimate_regimes(d, ["I", "II"], GLM)
    res = contrast_test(fits["II"], fits["I"])
    assert abs(res.estimate) <= 3 * res.std_error


def test_errors():
    small = simulate_trial(SimParams(n=20), seed=0)
    with pytest.raises(TmleError):
        estimate_regime_mean(small, "II", GLM)
    d = simulate_trial(SimParams(n=200), seed=0)
    no_webapp = d.subset(d.a0 != 2)
    with pytest.raises(ValueError, match="arm 2"):
        estimate_regime_mean(no_webapp, "III", GLM)


def test_estimator_api(sim_data):
    est = SmartTMLE(regime="IIA")
    assert est.get_params()["regime"] == "IIA"
    est.fit(sim_data)
    assert est.psi_ == pytest.approx(estimate_regime_mean(sim_data, "IIA", GLM).psi, abs=1e-12)
    assert est.std_error() == pytest.approx(standard_error(est.fit_))
    with pytest.raises(TypeError):
        est.fit(np.zeros((3, 3)))
