"""Cross-validated convex stacking over a small library of regressions."""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, clone
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .glm import GLMRegressor
from .hal import HALRegressor
from .utils import check_weights, make_folds

log = logging.getLogger(__name__)

__all__ = [
    "SlFit",
    "SuperLearnerRegressor",
    "default_library",
    "fit_superlearner",
    "make_folds",
    "simplex_least_squares",
    "sl_predict",
]


class SuperLearnerError(RuntimeError):
    pass


def default_library(hal: bool = True) -> list:
    lib = [
        ("intercept", GLMRegressor(family="intercept")),
        ("poisson", GLMRegressor(family="poisson")),
        ("negbin", GLMRegressor(family="negbin")),
    ]
    if hal:
        lib.append(("hal", HALRegressor()))
    return lib


@dataclass(frozen=True)
class SlFit:
    names: tuple
    weights: np.ndarray
    learners: tuple
    cv_risk: np.ndarray
    ensemble_cv_risk: float
    failed: tuple
    count_outcome: bool = True
    info: dict = field(default_factory=dict)


def _project_simplex(v):
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    return np.maximum(v - css[rho] / (rho + 1.0), 0.0)


def _risk(Z, y, w, a):
    r = y - Z @ a
    return float(w @ (r * r) / w.sum())


def simplex_least_squares(Z, y, w=None, tol=1e-8, max_iter=10_000):
    """Minimise weighted MSE of ``y - Z a`` over the probability simplex.

    Exponentiated-gradient iterations from the uniform point, stopped when
    the projected-gradient mapping norm drops below ``tol``. The result is
    never worse than the best single column.
    """
    Z = np.asarray(Z, float)
    y = np.asarray(y, float)
    n, m = Z.shape
    w = check_weights(w, n)
    wn = w / w.sum()
    G = (Z.T * wn) @ Z
    c = (Z.T * wn) @ y
    L = 2.0 * max(np.linalg.eigvalsh(G).max(), 1e-300)
    a = np.full(m, 1.0 / m)
    eta = 1.0 / L
    it = 0
    gmap = np.inf
    for it in range(1, max_iter + 1):
        g = 2.0 * (G @ a - c)
        gmap = L * np.linalg.norm(a - _project_simplex(a - g / L))
        if gmap <= tol:
            break
        # shift gradient for numerical safety; EG is invariant to it
        z = np.log(np.maximum(a, 1e-300)) - eta * (g - g.min())
        z -= z.max()
        a = np.exp(z)
        a /= a.sum()
    risk = _risk(Z, y, w, a)
    vertex_risk = np.array([_risk(Z, y, w, np.eye(m)[j]) for j in range(m)])
    j = int(np.argmin(vertex_risk))
    if vertex_risk[j] < risk:
        a = np.eye(m)[j]
        risk = vertex_risk[j]
    return a, {"iterations": it, "gradient_mapping": float(gmap), "risk": risk}


def simplex_least_squares_exact(Z, y, w=None):
    """Enumerate supports and solve each equality-constrained problem; for small ``m``."""
    Z = np.asarray(Z, float)
    n, m = Z.shape
    w = check_weights(w, n)
    best, best_risk = None, np.inf
    for size in range(1, m + 1):
        for S in itertools.combinations(range(m), size):
            S = list(S)
            ZS = Z[:, S]
            G = (ZS.T * w) @ ZS
            c = (ZS.T * w) @ y
            K = np.zeros((size + 1, size + 1))
            K[:size, :size] = G
            K[:size, size] = 1.0
            K[size, :size] = 1.0
            rhs = np.concatenate([c, [1.0]])
            sol = np.linalg.lstsq(K, rhs, rcond=None)[0][:size]
            if np.any(sol < -1e-12):
                continue
            a = np.zeros(m)
            a[S] = np.maximum(sol, 0)
            a /= a.sum()
            r = _risk(Z, y, w, a)
            if r < best_risk:
                best, best_risk = a, r
    return best, best_risk


def _fit_one(learner, X, y, w):
    est = clone(learner)
    try:
        est.fit(X, y, sample_weight=w)
    except TypeError:
        est.fit(X, y)
    return est


def fit_superlearner(library: Sequence, X, y, weights=None, n_folds: int = 5, seed=0,
                     count_outcome: bool = True) -> SlFit:
    """Fit the convex super learner.

    ``library`` is a sequence of ``(name, estimator)`` pairs. Candidates that
    raise or produce non-finite out-of-fold predictions get weight zero.
    """
    if len(library) < 1:
        raise ValueError("library must contain at least one candidate")
    X = np.asarray(X, float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, float).reshape(-1)
    n = X.shape[0]
    w = check_weights(weights, n)
    folds = make_folds(n, n_folds, seed)
    names = tuple(name for name, _ in library)
    m = len(library)
    Z = np.full((n, m), np.nan)
    failed = np.zeros(m, dtype=bool)
    for j, (name, learner) in enumerate(library):
        for k in range(n_folds):
            tr, te = folds != k, folds == k
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    est = _fit_one(learner, X[tr], y[tr], w[tr])
                    Z[te, j] = est.predict(X[te])
            except Exception as exc:  # noqa: BLE001 - candidate failures are tolerated
                log.warning("super learner candidate %s failed on fold %d: %s", name, k, exc)
                failed[j] = True
                break
        if not np.all(np.isfinite(Z[:, j])):
            failed[j] = True
    ok = np.flatnonzero(~failed)
    if ok.size == 0:
        raise SuperLearnerError("all super learner candidates failed")
    cv_risk = np.full(m, np.inf)
    for j in ok:
        cv_risk[j] = _risk(Z[:, [j]], y, w, np.ones(1))
    a_ok, info = simplex_least_squares(Z[:, ok], y, w)
    weights_ = np.zeros(m)
    weights_[ok] = a_ok
    learners = []
    for j, (name, learner) in enumerate(library):
        if failed[j]:
            learners.append(None)
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            learners.append(_fit_one(learner, X, y, w))
    return SlFit(
        names=names,
        weights=weights_,
        learners=tuple(learners),
        cv_risk=cv_risk,
        ensemble_cv_risk=info["risk"],
        failed=tuple(np.array(names)[failed]),
        count_outcome=count_outcome,
        info={**info, "folds": folds, "oof": Z},
    )


def sl_predict(fit: SlFit, X) -> np.ndarray:
    X = np.asarray(X, float)
    if X.ndim == 1:
        X = X[:, None]
    out = np.zeros(X.shape[0])
    for a, est in zip(fit.weights, fit.learners):
        if est is None or a == 0:
            continue
        out += a * est.predict(X)
    if fit.count_outcome:
        out = np.maximum(out, 0.0)
    return out


class SuperLearnerRegressor(RegressorMixin, BaseEstimator):
    """Estimator wrapper for :func:`fit_superlearner`.

    ``library=None`` uses the intercept / Poisson / negative binomial / HAL library.
    """

    def __init__(self, library=None, n_folds=5, seed=0, count_outcome=True):
        self.library = library
        self.n_folds = n_folds
        self.seed = seed
        self.count_outcome = count_outcome

    def fit(self, X, y, sample_weight=None):
        X, y = check_X_y(X, y, y_numeric=True)
        lib = default_library() if self.library is None else self.library
        self.fit_ = fit_superlearner(lib, X, y, sample_weight, self.n_folds, self.seed,
                                     self.count_outcome)
        self.weights_ = self.fit_.weights
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "fit_")
        return sl_predict(self.fit_, check_array(X))
