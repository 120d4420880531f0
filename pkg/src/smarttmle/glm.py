"""Generalized linear models fit by iteratively reweighted least squares.

Families: logistic (logit link, fractional responses allowed), Poisson and
negative binomial (log link), and an intercept-only mean model on the log
scale. All fits accept observation weights and an offset.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.special import expit, gammaln, xlogy
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

FAMILIES = ("logistic", "poisson", "negbin", "intercept")

_ETA_CLIP = 700.0


class GlmWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class GlmSpec:
    family: str = "poisson"
    columns: tuple = ()
    max_iter: int = 100
    tol: float = 1e-10
    log_theta_bounds: tuple = (-5.0, 10.0)
    theta_tol: float = 1e-6

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass(frozen=True)
class GlmFit:
    coef: np.ndarray
    converged: bool
    deviance: float
    n_iter: int = 0
    theta: Optional[float] = None
    ridge: bool = False
    info: dict = field(default_factory=dict)


def _inverse_link(family: str, eta: np.ndarray) -> np.ndarray:
    if family == "logistic":
        return expit(eta)
    return np.exp(np.clip(eta, -_ETA_CLIP, _ETA_CLIP))


def _variance_terms(family, mu, theta):
    """Return (dmu/deta, V(mu))."""
    if family == "logistic":
        v = mu * (1.0 - mu)
        return v, v
    if family == "poisson":
        return mu, mu
    return mu, mu + mu * mu / theta


def _xlogx_over(y, mu):
    # y * log(y / mu) with 0 * log(0 / 0) = 0
    return xlogy(y, y) - xlogy(y, mu)


def _deviance(family, y, mu, w, theta=None) -> float:
    if family == "logistic":
        d = _xlogx_over(y, mu) + _xlogx_over(1.0 - y, 1.0 - mu)
    elif family == "poisson":
        d = _xlogx_over(y, mu) - (y - mu)
    else:
        d = _xlogx_over(y, mu) - (y + theta) * np.log((y + theta) / (mu + theta))
    return float(2.0 * np.sum(w * d))


def negbin_loglik(y, mu, w, theta) -> float:
    ll = (
        gammaln(y + theta) - gammaln(theta) - gammaln(y + 1.0)
        + theta * np.log(theta / (theta + mu)) + xlogy(y, mu / (theta + mu))
    )
    return float(np.sum(w * ll))


def _solve(A, b):
    """Cholesky solve; falls back to a 1e-8 ridge, then least squares."""
    try:
        return linalg.cho_solve(linalg.cho_factor(A, check_finite=False), b), False
    except (linalg.LinAlgError, ValueError):
        pass
    A2 = A + 1e-8 * np.eye(A.shape[0])
    try:
        return linalg.cho_solve(linalg.cho_factor(A2, check_finite=False), b), True
    except (linalg.LinAlgError, ValueError):
        return np.linalg.lstsq(A2, b, rcond=None)[0], True


def _initial_mu(family, y, w):
    if family == "logistic":
        return (w * y + 0.5) / (w + 1.0)
    return y + 0.1 + 0.1 * np.average(y, weights=w if w.sum() > 0 else None)


def _irls(family, X, y, w, offset, max_iter, tol, theta=None, start=None):
    n, p = X.shape
    ridge = False
    if start is None:
        mu = _initial_mu(family, y, w)
        eta = np.log(mu / (1.0 - mu)) if family == "logistic" else np.log(mu)
        dmu, var = _variance_terms(family, mu, theta)
        W = w * dmu * dmu / var
        XtW = X.T * W
        beta, r = _solve(XtW @ X, XtW @ (eta - offset))
        ridge |= r
    else:
        beta = np.asarray(start, dtype=float).copy()
    eta = X @ beta + offset
    mu = _inverse_link(family, eta)
    dev = _deviance(family, y, mu, w, theta)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        dmu, var = _variance_terms(family, mu, theta)
        var = np.maximum(var, 1e-300)
        W = w * dmu * dmu / var
        score = X.T @ (w * (y - mu) * dmu / var)
        XtW = X.T * W
        step, r = _solve(XtW @ X, score)
        ridge |= r
        if not np.all(np.isfinite(step)):
            break
        t = 1.0
        for _ in range(40):
            beta_new = beta + t * step
            eta_new = X @ beta_new + offset
            mu_new = _inverse_link(family, eta_new)
            dev_new = _deviance(family, y, mu_new, w, theta)
            if np.isfinite(dev_new) and dev_new <= dev + 1e-10 * (1.0 + abs(dev)):
                break
            t *= 0.5
        else:
            break
        delta = beta_new - beta
        beta, mu, dev = beta_new, mu_new, dev_new
        if np.all(np.abs(delta) <= tol * (1.0 + np.abs(beta))):
            converged = True
            break
    converged = converged and bool(np.all(np.isfinite(beta)))
    return beta, converged, dev, it, ridge


def _as_inputs(X, y, weights, offset):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float).reshape(-1)
    n = X.shape[0]
    if y.shape[0] != n:
        raise ValueError(f"X has {n} rows but y has {y.shape[0]}")
    w = np.ones(n) if weights is None else np.broadcast_to(np.asarray(weights, float), (n,)).copy()
    o = np.zeros(n) if offset is None else np.broadcast_to(np.asarray(offset, float), (n,)).copy()
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    return X, y, w, o


def fit_glm(spec: GlmSpec, X, y, weights=None, offset=None, start=None) -> GlmFit:
    """Maximum (weighted) likelihood fit of a GLM.

    ``X`` is the full design matrix; include a column of ones for an
    intercept. Non-convergence is reported through ``GlmFit.converged``
    with the last iterate returned; callers decide what to do with it.
    """
    X, y, w, o = _as_inputs(X, y, weights, offset)
    fam = spec.family
    if fam == "logistic" and (np.any(y < 0) or np.any(y > 1)):
        raise ValueError("logistic responses must lie in [0, 1]")
    if fam in ("poisson", "negbin", "intercept") and np.any(y < 0):
        raise ValueError("count responses must be nonnegative")

    if fam == "intercept":
        num = np.sum(w * y)
        den = np.sum(w * np.exp(o))
        coef = np.array([np.log(num / den) if num > 0 else -np.inf])
        mu = np.exp(coef[0] + o)
        dev = _deviance("poisson", y, mu, w) if num > 0 else 0.0
        return GlmFit(coef=coef, converged=True, deviance=dev, n_iter=0)

    if fam != "negbin":
        beta, conv, dev, it, ridge = _irls(fam, X, y, w, o, spec.max_iter, spec.tol, start=start)
        if ridge:
            warnings.warn("singular weighted normal equations; ridge-stabilised", GlmWarning)
        return GlmFit(coef=beta, converged=conv, deviance=dev, n_iter=it, ridge=ridge)

    return _fit_negbin(spec, X, y, w, o, start)


def _fit_negbin(spec, X, y, w, o, start):
    # Poisson fit gives the warm start for every profile evaluation.
    b0, _, _, _, _ = _irls("poisson", X, y, w, o, spec.max_iter, spec.tol, start=start)
    cache = {}

    def profile(log_theta):
        theta = float(np.exp(log_theta))
        beta, conv, dev, it, ridge = _irls(
            "negbin", X, y, w, o, spec.max_iter, spec.tol, theta=theta, start=b0
        )
        mu = _inverse_link("negbin", X @ beta + o)
        ll = negbin_loglik(y, mu, w, theta)
        if not np.isfinite(ll):
            ll = -np.inf
        cache[log_theta] = (beta, conv, dev, it, ridge, theta)
        return ll

    lo, hi = spec.log_theta_bounds
    gr = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - gr * (b - a)
    d = a + gr * (b - a)
    fc, fd = profile(c), profile(d)
    while b - a > spec.theta_tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - gr * (b - a)
            fc = profile(c)
        else:
            a, c, fc = c, d, fd
            d = a + gr * (b - a)
            fd = profile(d)
    best = c if fc >= fd else d
    beta, conv, dev, it, ridge, theta = cache[best]
    if ridge:
        warnings.warn("singular weighted normal equations; ridge-stabilised", GlmWarning)
    return GlmFit(coef=beta, converged=conv, deviance=dev, n_iter=it, theta=theta, ridge=ridge,
                  info={"loglik": max(fc, fd)})


def predict_glm(fit: GlmFit, spec: GlmSpec, X, offset=None) -> np.ndarray:
    """Inverse link of ``X @ coef + offset``."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    o = np.zeros(n) if offset is None else np.broadcast_to(np.asarray(offset, float), (n,))
    if spec.family == "intercept":
        if not np.isfinite(fit.coef[0]):
            return np.zeros(n)
        return np.exp(fit.coef[0] + o)
    if X.shape[1] != fit.coef.shape[0]:
        raise ValueError(f"X has {X.shape[1]} columns, fit expects {fit.coef.shape[0]}")
    return _inverse_link(spec.family, X @ fit.coef + o)


class GLMRegressor(RegressorMixin, BaseEstimator):
    """scikit-learn style wrapper around :func:`fit_glm`.

    Parameters
    ----------
    family : {"logistic", "poisson", "negbin", "intercept"}
    fit_intercept : bool
        Prepend a column of ones to ``X``.
    max_iter, tol
        IRLS controls; ``tol`` bounds the coefficient change at convergence.
    """

    def __init__(self, family="poisson", fit_intercept=True, max_iter=100, tol=1e-10):
        self.family = family
        self.fit_intercept = fit_intercept
        self.max_iter = max_iter
        self.tol = tol

    def _design(self, X):
        if self.fit_intercept:
            return np.column_stack([np.ones(X.shape[0]), X])
        return X

    def fit(self, X, y, sample_weight=None, offset=None):
        X, y = check_X_y(X, y, y_numeric=True, ensure_min_features=0)
        self.spec_ = GlmSpec(family=self.family, max_iter=self.max_iter, tol=self.tol)
        self.n_features_in_ = X.shape[1]
        self.fit_ = fit_glm(self.spec_, self._design(X), y, sample_weight, offset)
        c = self.fit_.coef
        if self.family == "intercept":
            self.intercept_, self.coef_ = float(c[0]), np.zeros(X.shape[1])
        elif self.fit_intercept:
            self.intercept_, self.coef_ = float(c[0]), c[1:]
        else:
            self.intercept_, self.coef_ = 0.0, c
        self.converged_ = self.fit_.converged
        return self

    def predict(self, X, offset=None):
        check_is_fitted(self, "fit_")
        X = check_array(X, ensure_min_features=0)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return predict_glm(self.fit_, self.spec_, self._design(X), offset)


class SaturatedPoissonRegressor(RegressorMixin, BaseEstimator):
    """Poisson GLM with one indicator per distinct covariate row (a saturated model).

    The MLE reproduces the weighted mean response within each observed cell.
    Rows from unseen cells are predicted by the overall weighted mean.
    """

    def __init__(self, max_iter=100, tol=1e-10):
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y, sample_weight=None):
        X, y = check_X_y(X, y, y_numeric=True, ensure_min_features=0)
        cells, inverse = np.unique(X, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        design = np.zeros((X.shape[0], cells.shape[0]))
        design[np.arange(X.shape[0]), inverse] = 1.0
        self.spec_ = GlmSpec("poisson", max_iter=self.max_iter, tol=self.tol)
        self.fit_ = fit_glm(self.spec_, design, y, sample_weight)
        self.cells_ = cells
        self._index = {tuple(c): j for j, c in enumerate(cells)}
        w = np.ones_like(y) if sample_weight is None else np.asarray(sample_weight, float)
        self.fallback_ = float(np.average(y, weights=w))
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "fit_")
        X = check_array(X, ensure_min_features=0)
        mu = np.exp(np.clip(self.fit_.coef, -_ETA_CLIP, _ETA_CLIP))
        idx = [self._index.get(tuple(row), -1) for row in X]
        return np.array([mu[j] if j >= 0 else self.fallback_ for j in idx])
