"""Targeted minimum loss-based estimation for sequentially randomized trials with dropout."""

__version__ = "0.1.0"

from .data import (  # noqa: E402
    CONTRASTS,
    REGIMES,
    DataError,
    Regime,
    SubjectRecord,
    TrialDataset,
    evaluate_rule_d,
    follows_regime,
    from_arrays,
    get_regime,
    parse_dataset,
    read_dataset,
    serialize_dataset,
)
from .glm import GLMRegressor, GlmFit, GlmSpec, fit_glm, predict_glm  # noqa: E402
from .hal import HALRegressor, HalConfig, fit_hal, hal_predict  # noqa: E402
from .inference import ContrastResult, contrast_test, variance_estimate  # noqa: E402
from .propensity import fit_propensities, regime_propensities  # noqa: E402
from .simulation import (  # noqa: E402
    SimParams,
    complete_case_difference,
    exact_regime_mean,
    run_power_study,
    simulate_trial,
    true_regime_mean_mc,
)
from .superlearner import SuperLearnerRegressor, fit_superlearner  # noqa: E402
from .tmle import SmartTMLE, TmleConfig, TmleFit, estimate_regime_mean, estimate_regimes  # noqa: E402

__all__ = [
    "CONTRASTS", "REGIMES", "ContrastResult", "DataError", "GLMRegressor", "GlmFit", "GlmSpec",
    "HALRegressor", "HalConfig", "Regime", "SimParams", "SmartTMLE", "SubjectRecord",
    "SuperLearnerRegressor", "TmleConfig", "TmleFit", "TrialDataset", "complete_case_difference",
    "contrast_test", "estimate_regime_mean", "estimate_regimes", "evaluate_rule_d",
    "exact_regime_mean", "fit_glm", "fit_hal", "fit_propensities", "fit_superlearner",
    "follows_regime", "from_arrays", "get_regime", "hal_predict", "parse_dataset",
    "predict_glm", "read_dataset", "regime_propensities", "run_power_study",
    "serialize_dataset", "simulate_trial", "true_regime_mean_mc", "variance_estimate",
]
