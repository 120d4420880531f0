"""Sequential-regression TMLE of a regime's counterfactual mean cumulative outcome.

Stages run backwards from the 9-month outcome. At each stage an initial
regression, pooled over arms, is fit among subjects still under follow-up,
then updated by a one-parameter logistic fluctuation on the unit-scaled
outcome whose covariate is the inverse regime propensity (the clever
covariate). The estimate is the empirical mean of the stage-1 targeted fit.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Optional

import numpy as np
from scipy.special import expit, logit
from sklearn.base import BaseEstimator, clone

from .data import ECOACH, Regime, SubjectRecord, TrialDataset, get_regime, rule_d, step_up_eligible
from .design import history, stage0_arm_block, stage1_arm_block, varying_columns
from .glm import GLMRegressor, GlmSpec, SaturatedPoissonRegressor, fit_glm
from .propensity import (
    DEFAULT_DELTA_G,
    PropensityFits,
    fit_censoring,
    fit_propensities,
    regime_propensities,
)
from .superlearner import SuperLearnerRegressor, default_library

log = logging.getLogger(__name__)

DEFAULT_DELTA_Y = 0.005

# Arm pattern of the five stacked blocks: (stage-0 arm, stage-1 policy family).
STACK_BLOCKS = ((1, "step_up"), (2, "step_up"), (1, "stay"), (2, "stay"), (0, "stay"))


class TmleError(RuntimeError):
    pass


@dataclass(frozen=True)
class TmleConfig:
    """Estimator options.

    ``learner`` is ``"glm"`` (Poisson), ``"superlearner"``, ``"intercept"``,
    ``"saturated"`` or an unfitted scikit-learn regressor.
    """

    learner: Any = "glm"
    delta_g: float = DEFAULT_DELTA_G
    delta_y: float = DEFAULT_DELTA_Y
    min_n: int = 30
    sl_folds: int = 5
    sl_hal: bool = True
    seed: int = 0
    fluct_tol: float = 1e-12


def make_learner(config: TmleConfig, stage: int):
    kind = config.learner
    if not isinstance(kind, str):
        return clone(kind)
    if kind == "glm":
        return GLMRegressor(family="poisson")
    if kind == "intercept":
        return GLMRegressor(family="intercept")
    if kind == "saturated":
        return SaturatedPoissonRegressor()
    if kind == "superlearner":
        return SuperLearnerRegressor(library=default_library(hal=config.sl_hal),
                                     n_folds=config.sl_folds, seed=config.seed + stage)
    raise ValueError(f"unknown learner {kind!r}")


class _StageRegression:
    """Initial regression that ignores columns constant among its fitting rows."""

    def __init__(self, learner, drop_constant: bool = True):
        self.learner = learner
        self.drop_constant = drop_constant

    def fit(self, X, y):
        self.keep_ = varying_columns(X) if self.drop_constant else np.arange(X.shape[1])
        Xk = X[:, self.keep_]
        if Xk.shape[1] == 0:
            Xk = np.zeros((X.shape[0], 1))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            self.learner.fit(Xk, y)
        return self

    def predict(self, X):
        Xk = X[:, self.keep_]
        if Xk.shape[1] == 0:
            Xk = np.zeros((X.shape[0], 1))
        return np.maximum(self.learner.predict(Xk), 0.0)


@dataclass(frozen=True)
class Fluctuation:
    """Logistic fluctuation ``logit(Q*/s) = logit(Q/s) + eps * H``."""

    eps: float
    scale: float
    delta_y: float
    converged: bool = True
    degenerate: bool = False

    def evaluate(self, q_init, H) -> np.ndarray:
        qs = np.clip(np.asarray(q_init, float) / self.scale, self.delta_y, 1.0 - self.delta_y)
        return self.scale * expit(logit(qs) + self.eps * np.asarray(H, float))


def fluctuate(q_init, H, pseudo, scale: float, delta_y: float = DEFAULT_DELTA_Y,
              tol: float = 1e-12, max_iter: int = 100) -> Fluctuation:
    """Fit the fluctuation parameter by fractional-response logistic regression.

    ``q_init`` are initial fits on ``[0, scale]``; their scaled values are
    bounded to ``[delta_y, 1 - delta_y]`` before taking the logit. Pseudo
    outcomes enter as ``pseudo / scale`` without bounding. Non-convergence
    falls back to ``eps = 0`` with ``converged=False``.
    """
    H = np.asarray(H, float)
    y = np.asarray(pseudo, float) / scale
    if np.any(y < -1e-12) or np.any(y > 1 + 1e-12):
        raise ValueError("pseudo-outcomes must lie in [0, scale]")
    y = np.clip(y, 0.0, 1.0)
    if not np.any(H != 0):
        return Fluctuation(0.0, scale, delta_y, converged=True, degenerate=True)
    qs = np.clip(np.asarray(q_init, float) / scale, delta_y, 1.0 - delta_y)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = fit_glm(GlmSpec("logistic", tol=tol, max_iter=max_iter), H[:, None], y,
                      offset=logit(qs), start=[0.0])
    eps = float(fit.coef[0])
    if not fit.converged or not np.isfinite(eps):
        log.warning("fluctuation did not converge; using eps = 0")
        return Fluctuation(0.0, scale, delta_y, converged=False)
    return Fluctuation(eps, scale, delta_y)


@dataclass(frozen=True)
class StackedData:
    """Five rows per subject: arms set per STACK_BLOCKS, pseudo-outcomes from the next stage."""

    stage: int
    subject: np.ndarray
    block: np.ndarray
    a0: np.ndarray
    a1: np.ndarray
    pseudo: np.ndarray
    fit_mask: np.ndarray

    def __len__(self):
        return self.subject.shape[0]


def build_stacked_dataset(data: TrialDataset, stage: int, evaluator: Callable, regime) -> StackedData:
    """Stack the data five times with arms set to each sister regime.

    ``evaluator(a0, a1, subject_index)`` returns the targeted next-stage fit
    on the outcome-increment scale. Rows used for fitting are those under
    follow-up through ``stage`` whose arms are consistent with the subject's
    observed stage-0 arm and, for ``stage == 2``, observed stage-1 arm
    (first matching block only); for ``stage == 1`` the row's policy family
    must be the regime's.
    """
    if stage not in (1, 2):
        raise ValueError("stacking is defined for stages 1 and 2")
    regime = get_regime(regime)
    n = data.n
    subject = np.tile(np.arange(n), 5)
    block = np.repeat(np.arange(5), n)
    a0 = np.repeat([float(b[0]) for b in STACK_BLOCKS], n)
    a1 = np.empty(5 * n)
    for k, (arm, fam) in enumerate(STACK_BLOCKS):
        sl = slice(k * n, (k + 1) * n)
        arms = np.full(n, float(arm))
        a1[sl] = rule_d(arms, data.y0, data.y1) if fam == "step_up" else np.where(
            np.isnan(data.y1), np.nan, arms)
    at_risk = (data.c1 if stage == 1 else data.c2)[subject] == 1
    pseudo = np.full(5 * n, np.nan)
    y_inc = (data.y1 if stage == 1 else data.y2)[subject]
    idx = np.flatnonzero(at_risk)
    if idx.size:
        pseudo[idx] = y_inc[idx] + evaluator(a0[idx], a1[idx], subject[idx])

    if stage == 2:
        match = at_risk & (a0 == data.a0[subject]) & (a1 == data.a1[subject])
        fit_mask = np.zeros(5 * n, dtype=bool)
        seen = np.zeros(n, dtype=bool)
        for r in np.flatnonzero(match):
            if not seen[subject[r]]:
                fit_mask[r] = True
                seen[subject[r]] = True
    else:
        fam = "step_up" if regime.is_step_up else "stay"
        fam_ok = np.array([f == fam or arm == 0 for arm, f in STACK_BLOCKS])[block]
        fit_mask = at_risk & (a0 == data.a0[subject]) & fam_ok
    return StackedData(stage, subject, block, a0, a1, pseudo, fit_mask)


def clever_covariate(fits: PropensityFits, record: SubjectRecord, regime, stage: int) -> float:
    """Inverse regime propensity for a follower under follow-up through ``stage``; else 0."""
    from .data import follows_regime
    from .propensity import regime_propensity

    regime = get_regime(regime)
    attended = all(getattr(record, f"c{s}") == 1 for s in range(1, stage + 1))
    through = 0 if stage == 1 else 1
    if not attended or not follows_regime(record, regime, through):
        return 0.0
    return 1.0 / regime_propensity(fits, record, regime, stage)


def clever_covariates(fits: PropensityFits, data: TrialDataset):
    """Observed-data clever covariates ``H`` (n x 3), the counterfactual ``1/g`` (n x 3)
    and follower indicators (n x 3)."""
    r = fits.regime
    g = regime_propensities(fits, data)
    a_star = r.stage0_arm
    seen = data.c1 == 1
    a1_star = np.full(data.n, np.nan)
    a1_star[seen] = (rule_d(np.full(seen.sum(), a_star), data.y0[seen], data.y1[seen])
                     if r.is_step_up else float(r.stage1_policy))
    f1 = (data.a0 == a_star) & seen
    f2 = f1 & (data.a1 == a1_star) & (data.c2 == 1)
    f3 = f2 & (data.c3 == 1)
    follow = np.column_stack([f1, f2, f3])
    with np.errstate(invalid="ignore", divide="ignore"):
        inv_g = 1.0 / g
    H = np.where(follow, inv_g, 0.0)
    return H, inv_g, follow, a1_star, g


@dataclass(frozen=True)
class SequentialStageFit:
    stage: int
    regression: Any
    fluctuation: Fluctuation
    n_fit: int

    @property
    def scale(self) -> float:
        return self.fluctuation.scale

    @property
    def eps(self) -> float:
        return self.fluctuation.eps


@dataclass(frozen=True)
class TmleFit:
    regime: Regime
    psi: float
    stages: tuple
    H: np.ndarray          # n x 3 observed clever covariates, stages 1..3
    D: np.ndarray          # n x 4 influence components D0..D3
    Qbar: np.ndarray       # n x 3 targeted Qbar*_1..3 at regime arms (NaN if undefined)
    ids: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.D.shape[0]

    @property
    def influence(self) -> np.ndarray:
        return self.D.sum(axis=1)

    def report(self) -> dict:
        d = self.diagnostics
        return {
            "regime": self.regime.label,
            "psi": self.psi,
            "n": self.n,
            "eps": [s.eps for s in self.stages],
            "scale": [s.scale for s in self.stages],
            "fluctuation_converged": [s.fluctuation.converged for s in self.stages],
            "ee_residuals": d["ee_residuals"],
            "H_min": d["H_min"],
            "H_max": d["H_max"],
            "min_propensity": d["min_propensity"],
            "truncated_propensities": d["truncated_propensities"],
            "followers": d["followers"],
        }


def _rows(stage, hist, idx, a0, a1=None):
    if stage == 1:
        return np.column_stack([stage0_arm_block(a0), hist[idx]])
    return np.column_stack([stage1_arm_block(a0, a1), hist[idx]])


def estimate_regime_mean(data: TrialDataset, regime, config: TmleConfig = TmleConfig(),
                         censoring: Optional[tuple] = None, stage3: Any = None) -> TmleFit:
    """TMLE of the regime's mean cumulative outcome ``E[Y1 + Y2 + Y3]``.

    ``censoring`` (fitted attendance models) and ``stage3`` (a fitted
    stage-3 initial regression) are regime-independent and may be shared
    across regimes estimated on the same data.
    """
    regime = get_regime(regime)
    n = data.n
    if n < config.min_n:
        raise TmleError(f"need at least {config.min_n} subjects, got {n}")
    if censoring is None:
        censoring = fit_censoring(data, config.delta_g)
    fits = fit_propensities(data, regime, config.delta_g, censoring)
    H, inv_g, follow, a1_star, g = clever_covariates(fits, data)
    for t in range(3):
        if not follow[:, t].any():
            raise TmleError(f"no uncensored followers of regime {regime.label} at stage {t + 1}")
    a_star = float(regime.stage0_arm)
    c1, c2, c3 = data.c1 == 1, data.c2 == 1, data.c3 == 1

    def h_at(t, a0, a1, idx):
        match = a0 == a_star
        if t > 1:
            match = match & (a1 == a1_star[idx])
        return np.where(match, inv_g[idx, t - 1], 0.0)

    # stage 3
    hist2, hist1, hist0 = history(data, 2), history(data, 1), history(data, 0)
    r3 = np.flatnonzero(c3)
    X3 = _rows(3, hist2, r3, data.a0[r3], data.a1[r3])
    if stage3 is None:
        stage3 = _StageRegression(make_learner(config, 3), config.learner != "saturated").fit(
            X3, data.y3[r3])
    q3 = stage3.predict(X3)
    s3 = max(float(data.y3[r3].max()), 1.0)
    fl3 = fluctuate(q3, H[r3, 2], data.y3[r3], s3, config.delta_y, config.fluct_tol)

    def q3_star(a0, a1, idx):
        return fl3.evaluate(stage3.predict(_rows(3, hist2, idx, a0, a1)), h_at(3, a0, a1, idx))

    # stage 2
    st2 = build_stacked_dataset(data, 2, q3_star, regime)
    m2 = st2.fit_mask
    X2 = _rows(2, hist1, st2.subject[m2], st2.a0[m2], st2.a1[m2])
    p2 = st2.pseudo[m2]
    reg2 = _StageRegression(make_learner(config, 2), config.learner != "saturated").fit(X2, p2)
    s2 = max(float(p2.max()), 1.0)
    fl2 = fluctuate(reg2.predict(X2), h_at(2, st2.a0[m2], st2.a1[m2], st2.subject[m2]), p2, s2,
                    config.delta_y, config.fluct_tol)

    def q2_star(a0, a1, idx):
        return fl2.evaluate(reg2.predict(_rows(2, hist1, idx, a0, a1)), h_at(2, a0, a1, idx))

    # stage 1
    st1 = build_stacked_dataset(data, 1, q2_star, regime)
    m1 = st1.fit_mask
    X1 = _rows(1, hist0, st1.subject[m1], st1.a0[m1])
    p1 = st1.pseudo[m1]
    reg1 = _StageRegression(make_learner(config, 1), config.learner != "saturated").fit(X1, p1)
    s1 = max(float(p1.max()), 1.0)
    fl1 = fluctuate(reg1.predict(X1), h_at(1, st1.a0[m1], None, st1.subject[m1]), p1, s1,
                    config.delta_y, config.fluct_tol)

    all_idx = np.arange(n)
    a_star_vec = np.full(n, a_star)
    qbar1 = fl1.evaluate(reg1.predict(_rows(1, hist0, all_idx, a_star_vec)), inv_g[:, 0])
    psi = float(np.mean(qbar1))

    # targeted fits at regime arms
    qbar = np.full((n, 3), np.nan)
    qbar[:, 0] = qbar1
    i1 = np.flatnonzero(c1)
    qbar[i1, 1] = data.y1[i1] + q2_star(a_star_vec[i1], a1_star[i1], i1)
    i2 = np.flatnonzero(c2)
    qbar[i2, 2] = data.y1[i2] + data.y2[i2] + q3_star(a_star_vec[i2], a1_star[i2], i2)

    D = np.zeros((n, 4))
    D[:, 0] = qbar1 - psi
    f1, f2, f3 = follow[:, 0], follow[:, 1], follow[:, 2]
    D[f1, 1] = H[f1, 0] * (qbar[f1, 1] - qbar1[f1])
    D[f2, 2] = H[f2, 1] * (qbar[f2, 2] - qbar[f2, 1])
    y_cum = data.y1 + data.y2 + data.y3
    D[f3, 3] = H[f3, 2] * (y_cum[f3] - qbar[f3, 2])

    truncated = int(np.sum(inv_g[~np.isnan(inv_g)] >= 1.0 / config.delta_g - 1e-9))
    stages = (
        SequentialStageFit(1, reg1, fl1, int(m1.sum())),
        SequentialStageFit(2, reg2, fl2, int(m2.sum())),
        SequentialStageFit(3, stage3, fl3, int(r3.size)),
    )
    diagnostics = {
        "ee_residuals": [float(D[:, t].mean()) for t in (1, 2, 3)],
        "H_min": [float(H[follow[:, t], t].min()) for t in range(3)],
        "H_max": [float(H[:, t].max()) for t in range(3)],
        "min_propensity": float(np.nanmin(g)),
        "truncated_propensities": truncated,
        "followers": [int(follow[:, t].sum()) for t in range(3)],
        "propensity": fits,
        "g": g,
    }
    return TmleFit(regime, psi, stages, H, D, qbar, data.ids, diagnostics)


def fit_stage3(data: TrialDataset, config: TmleConfig = TmleConfig()):
    """Regime-independent stage-3 initial regression, shareable across regimes."""
    r3 = np.flatnonzero(data.c3 == 1)
    X3 = _rows(3, history(data, 2), r3, data.a0[r3], data.a1[r3])
    return _StageRegression(make_learner(config, 3), config.learner != "saturated").fit(
        X3, data.y3[r3])


def estimate_regimes(data: TrialDataset, regimes, config: TmleConfig = TmleConfig()) -> dict:
    """Estimate several regimes on one dataset, sharing censoring and stage-3 fits."""
    censoring = fit_censoring(data, config.delta_g)
    stage3 = fit_stage3(data, config) if (data.c3 == 1).any() else None
    return {get_regime(r).label: estimate_regime_mean(data, r, config, censoring, stage3)
            for r in regimes}


class SmartTMLE(BaseEstimator):
    """Estimator-style front end: ``SmartTMLE(regime="II").fit(data).psi_``."""

    def __init__(self, regime="II", learner="glm", delta_g=DEFAULT_DELTA_G,
                 delta_y=DEFAULT_DELTA_Y, min_n=30, sl_folds=5, sl_hal=True, seed=0):
        self.regime = regime
        self.learner = learner
        self.delta_g = delta_g
        self.delta_y = delta_y
        self.min_n = min_n
        self.sl_folds = sl_folds
        self.sl_hal = sl_hal
        self.seed = seed

    def _config(self) -> TmleConfig:
        return TmleConfig(learner=self.learner, delta_g=self.delta_g, delta_y=self.delta_y,
                          min_n=self.min_n, sl_folds=self.sl_folds, sl_hal=self.sl_hal,
                          seed=self.seed)

    def fit(self, data: TrialDataset, y=None):
        if not isinstance(data, TrialDataset):
            raise TypeError("SmartTMLE.fit expects a TrialDataset")
        self.fit_ = estimate_regime_mean(data, self.regime, self._config())
        self.psi_ = self.fit_.psi
        self.influence_ = self.fit_.influence
        return self

    def std_error(self) -> float:
        from .inference import influence_components, variance_estimate

        ic = influence_components(self.fit_)
        return float(np.sqrt(variance_estimate(ic) / self.fit_.n))
