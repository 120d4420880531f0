"""Randomization and visit-attendance probabilities, and regime-following propensities."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import warnings

import numpy as np

from .data import ECOACH, Regime, SubjectRecord, TrialDataset, from_arrays, get_regime, step_up_eligible
from .design import stage_columns, stage_design, varying_columns
from .glm import GlmFit, GlmSpec, GlmWarning, fit_glm, predict_glm

DEFAULT_DELTA_G = 0.01


class PropensityError(ValueError):
    pass


def estimate_gA0(data: TrialDataset, regime) -> float:
    """Empirical share of subjects randomized to the regime's stage-0 arm."""
    regime = get_regime(regime)
    if data.n == 0:
        raise PropensityError("empty dataset")
    k = int(np.sum(data.a0 == regime.stage0_arm))
    if k == 0:
        raise PropensityError(f"no subjects randomized to arm {regime.stage0_arm} (regime {regime.label})")
    return k / data.n


@dataclass(frozen=True)
class StageOnePropensity:
    """Probability of receiving the regime's stage-1 arm given (y0, y1).

    Equal to ``eligible_prob`` on the step-up eligible region and exactly 1 elsewhere.
    """

    eligible_prob: float
    arm: int
    applies: bool = True

    def __call__(self, y0, y1):
        y0 = np.asarray(y0, dtype=float)
        y1 = np.asarray(y1, dtype=float)
        if not self.applies:
            return np.ones(np.broadcast(y0, y1).shape)
        elig = step_up_eligible(np.full(np.broadcast(y0, y1).shape, self.arm), y0, y1)
        return np.where(elig, self.eligible_prob, 1.0)


def estimate_gA1(data: TrialDataset, regime) -> StageOnePropensity:
    """Stage-1 propensity: step-up share (step-up regimes) or stay share (static active arms)."""
    regime = get_regime(regime)
    arm = regime.stage0_arm
    if arm == 0:
        return StageOnePropensity(1.0, arm, applies=False)
    elig = (data.a0 == arm) & (data.c1 == 1) & step_up_eligible(data.a0, data.y0, data.y1)
    k = int(elig.sum())
    if k == 0:
        raise PropensityError(f"no step-up eligible attendees in arm {arm} (regime {regime.label})")
    p_up = float(np.mean(data.a1[elig] == ECOACH))
    return StageOnePropensity(p_up if regime.is_step_up else 1.0 - p_up, arm)


@dataclass(frozen=True)
class CensoringModel:
    """Pooled main-terms logistic model for attending visit ``visit``."""

    visit: int
    fit: Optional[GlmFit]
    keep: np.ndarray
    constant: Optional[float] = None
    separated: bool = False
    n_fit: int = 0
    columns: tuple = ()

    def predict(self, data: TrialDataset, a0, a1=None) -> np.ndarray:
        if self.constant is not None:
            return np.full(data.n, self.constant)
        X = stage_design(data, self.visit, a0, a1)[:, self.keep]
        X = np.column_stack([np.ones(data.n), X])
        with np.errstate(invalid="ignore"):
            return predict_glm(self.fit, GlmSpec("logistic"), np.nan_to_num(X))


def estimate_gC(data: TrialDataset, visit: int, delta_g: float = DEFAULT_DELTA_G) -> CensoringModel:
    """Logistic regression of ``C_visit`` on arm history and covariate history, pooled over arms.

    Fit among subjects who attended every earlier visit. A degenerate outcome
    (all attend or all miss) yields a constant model.
    """
    if visit not in (1, 2, 3):
        raise ValueError("visit must be 1, 2 or 3")
    if visit == 1:
        rows = np.ones(data.n, dtype=bool)
    else:
        rows = getattr(data, f"c{visit - 1}") == 1
    y = getattr(data, f"c{visit}")[rows]
    if y.size == 0:
        raise PropensityError(f"no subjects at risk for visit {visit}")
    if np.all(y == y[0]):
        return CensoringModel(visit, None, np.arange(0), constant=float(y[0]), n_fit=int(y.size))
    a1 = data.a1 if visit > 1 else None
    X = stage_design(data, visit, data.a0, a1)[rows]
    keep = varying_columns(X)
    design = np.column_stack([np.ones(X.shape[0]), X[:, keep]])
    with warnings.catch_warnings():
        # sparse dropout often separates; recorded through `separated` instead
        warnings.simplefilter("ignore", GlmWarning)
        fit = fit_glm(GlmSpec("logistic"), design, y)
    p = predict_glm(fit, GlmSpec("logistic"), design)
    separated = (not fit.converged) or bool(np.any(p < delta_g) or np.any(p > 1 - 1e-8))
    return CensoringModel(visit, fit, keep, separated=separated, n_fit=int(y.size),
                          columns=tuple(np.array(stage_columns(visit))[keep]))


@dataclass(frozen=True)
class PropensityFits:
    regime: Regime
    gA0: float
    gA1: StageOnePropensity
    gC: tuple
    delta_g: float = DEFAULT_DELTA_G
    info: dict = field(default_factory=dict)


def fit_censoring(data: TrialDataset, delta_g: float = DEFAULT_DELTA_G) -> tuple:
    return tuple(estimate_gC(data, t, delta_g) for t in (1, 2, 3))


def fit_propensities(data: TrialDataset, regime, delta_g: float = DEFAULT_DELTA_G,
                     censoring: Optional[tuple] = None) -> PropensityFits:
    regime = get_regime(regime)
    gA0 = estimate_gA0(data, regime)
    gA1 = estimate_gA1(data, regime)
    gC = censoring if censoring is not None else fit_censoring(data, delta_g)
    return PropensityFits(regime, gA0, gA1, tuple(gC), delta_g)


def regime_propensities(fits: PropensityFits, data: TrialDataset) -> np.ndarray:
    """n x 3 array of cumulative propensities through visits 1..3 at regime-consistent arms.

    Entries are NaN where the covariate history needed is unobserved.
    Each factor is truncated below at ``delta_g``.
    """
    r, lo = fits.regime, fits.delta_g
    a0 = np.full(data.n, float(r.stage0_arm))
    a1 = np.full(data.n, np.nan)
    seen = data.c1 == 1
    if r.is_step_up:
        a1[seen] = np.where(step_up_eligible(a0[seen], data.y0[seen], data.y1[seen]), ECOACH,
                            r.stage0_arm)
    else:
        a1[seen] = float(r.stage1_policy)
    clip = lambda p: np.clip(p, lo, 1.0)  # noqa: E731
    g = np.full((data.n, 3), np.nan)
    g[:, 0] = clip(fits.gA0) * clip(fits.gC[0].predict(data, a0))
    gA1 = clip(fits.gA1(data.y0, data.y1))
    g2 = g[:, 0] * gA1 * clip(fits.gC[1].predict(data, a0, a1))
    g[:, 1] = np.where(seen, g2, np.nan)
    g3 = g[:, 1] * clip(fits.gC[2].predict(data, a0, a1))
    g[:, 2] = np.where(data.c2 == 1, g3, np.nan)
    return g


def regime_propensity(fits: PropensityFits, record: SubjectRecord, regime, through_visit: int) -> float:
    """Cumulative regime propensity for a single record."""
    regime = get_regime(regime)
    if regime != fits.regime:
        raise ValueError("fits were estimated for a different regime")
    if through_visit not in (1, 2, 3):
        raise ValueError("through_visit must be 1, 2 or 3")
    needed = {1: (), 2: ("w1", "y1"), 3: ("w1", "y1", "w2", "y2")}[through_visit]
    if any(getattr(record, f) is None for f in needed):
        raise PropensityError(f"record {record.id}: covariates needed through visit {through_visit - 1} are absent")
    one = from_arrays(
        [record.id],
        **{k: [np.nan if getattr(record, k) is None else getattr(record, k)]
           for k in ("w0", "y0", "a0", "c1", "w1", "y1", "a1", "c2", "w2", "y2", "c3", "y3")},
    )
    return float(regime_propensities(fits, one)[0, through_visit - 1])
