"""Influence-function variance, covariance and Wald contrasts between regimes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .tmle import TmleFit

DEGENERATE_TAU = 1e-12


class InferenceError(ValueError):
    pass


@dataclass(frozen=True)
class InfluenceCurve:
    components: np.ndarray  # n x 4, D0..D3

    @property
    def total(self) -> np.ndarray:
        return self.components.sum(axis=1)

    @property
    def n(self) -> int:
        return self.components.shape[0]


@dataclass(frozen=True)
class ContrastResult:
    regimes: tuple
    estimate: float
    std_error: float
    z: float
    p_value: float
    ci: tuple
    alpha: float
    reject: bool

    def as_row(self) -> dict:
        return {
            "contrast": f"{self.regimes[0]}-{self.regimes[1]}",
            "estimate": self.estimate,
            "std_error": self.std_error,
            "ci_lower": self.ci[0],
            "ci_upper": self.ci[1],
            "z": self.z,
            "p_value": self.p_value,
            "reject": int(self.reject),
        }


def influence_components(fit: TmleFit) -> InfluenceCurve:
    return InfluenceCurve(np.array(fit.D, dtype=float))


def variance_estimate(ic: InfluenceCurve, sum_of_squares: bool = False) -> float:
    """Empirical second moment of the summed influence function.

    With ``sum_of_squares=True`` the squared components are summed instead
    (cross-stage products dropped), for comparison only.
    """
    if ic.n < 2:
        raise InferenceError("need at least 2 subjects")
    if sum_of_squares:
        return float(np.mean(np.sum(ic.components ** 2, axis=1)))
    return float(np.mean(ic.total ** 2))


def covariance_estimate(ic1: InfluenceCurve, ic2: InfluenceCurve) -> float:
    if ic1.n != ic2.n:
        raise InferenceError(f"influence curves have different lengths ({ic1.n} vs {ic2.n})")
    return float(np.mean(ic1.total * ic2.total))


def normal_quantile(p: float) -> float:
    return float(ndtri(p))


def confidence_interval(fit: TmleFit, alpha: float = 0.05) -> tuple:
    ic = influence_components(fit)
    se = np.sqrt(variance_estimate(ic) / ic.n)
    z = normal_quantile(1 - alpha / 2)
    return fit.psi - z * se, fit.psi + z * se


def standard_error(fit: TmleFit) -> float:
    ic = influence_components(fit)
    return float(np.sqrt(variance_estimate(ic) / ic.n))


def contrast_test(fit1: TmleFit, fit2: TmleFit, alpha: float = 0.05) -> ContrastResult:
    """Wald test of ``psi1 == psi2`` using the joint influence function.

    Identical fits give a zero contrast with ``p = 1``; otherwise a
    standard error below 1e-12 is an error.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if fit1.n != fit2.n or not np.array_equal(fit1.ids, fit2.ids):
        raise InferenceError("fits were computed on different datasets")
    ic1, ic2 = influence_components(fit1), influence_components(fit2)
    n = ic1.n
    est = fit1.psi - fit2.psi
    tau2 = variance_estimate(ic1) + variance_estimate(ic2) - 2 * covariance_estimate(ic1, ic2)
    tau = float(np.sqrt(max(tau2, 0.0)))
    zq = normal_quantile(1 - alpha / 2)
    labels = (fit1.regime.label, fit2.regime.label)
    if tau <= DEGENERATE_TAU:
        if est == 0.0:
            return ContrastResult(labels, 0.0, 0.0, 0.0, 1.0, (0.0, 0.0), alpha, False)
        raise InferenceError("degenerate influence-function variance; p-value undefined")
    se = tau / np.sqrt(n)
    z = est / se
    p = float(min(1.0, 2.0 * ndtr(-abs(z))))
    return ContrastResult(labels, est, se, float(z), p, (est - zq * se, est + zq * se), alpha,
                          bool(abs(z) > zq))
