"""A simplified highly adaptive LASSO.

Zero-order spline (indicator) basis over all variable subsets up to a given
interaction degree, with an L1-penalised least-squares fit by coordinate
descent and a cross-validated penalty.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numba
import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .utils import check_weights, make_folds

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class HalConfig:
    max_degree: int = 2
    n_lambda: int = 50
    lambda_decades: float = 4.0
    n_folds: int = 5
    max_basis: int = 2000
    tol: float = 1e-7
    max_passes: int = 1000
    seed: int = 0
    # stop the CV path after this many grid points past the running minimum; 0 = full path
    patience: int = 10

    def __post_init__(self):
        if self.max_degree < 1:
            raise ValueError("max_degree must be >= 1")
        if self.n_folds < 2:
            raise ValueError("n_folds must be >= 2")
        if self.n_lambda < 2:
            raise ValueError("n_lambda must be >= 2")


@dataclass(frozen=True)
class HalFit:
    subsets: tuple          # variable index tuple per retained basis function
    knots: tuple            # knot tuple per retained basis function
    coef: np.ndarray
    intercept: float
    lambda_: float
    lambdas: np.ndarray
    cv_risk: np.ndarray
    n_features: int
    n_basis: int
    info: dict = field(default_factory=dict)


def hal_basis(X, config: HalConfig = HalConfig()):
    """Indicator basis ``1(x_S >= knot_S)`` over subsets ``S`` and observed knots.

    Returns ``(B, subsets, knots)``. Constant columns (including the
    all-ones column, absorbed by the intercept) and duplicates are dropped;
    at most ``config.max_basis`` columns of largest variance are kept.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    if p < 1:
        raise ValueError("need at least one feature")
    cols, subsets, knots = [], [], []
    for deg in range(1, min(config.max_degree, p) + 1):
        for S in itertools.combinations(range(p), deg):
            XS = X[:, S]
            kn = np.unique(XS, axis=0)
            B = np.ones((n, kn.shape[0]), dtype=bool)
            for j in range(deg):
                B &= XS[:, j][:, None] >= kn[None, :, j]
            cols.append(B)
            subsets.extend([S] * kn.shape[0])
            knots.extend(tuple(k) for k in kn)
    B = np.concatenate(cols, axis=1)
    frac = B.mean(axis=0)
    keep = (frac > 0) & (frac < 1)
    packed = np.packbits(B, axis=0).T
    _, first = np.unique(packed, axis=0, return_index=True)
    uniq = np.zeros(B.shape[1], dtype=bool)
    uniq[first] = True
    idx = np.flatnonzero(keep & uniq)
    if idx.size > config.max_basis:
        var = frac[idx] * (1 - frac[idx])
        order = np.argsort(-var, kind="stable")[: config.max_basis]
        idx = np.sort(idx[order])
        log.info("HAL basis truncated to %d columns", config.max_basis)
    return (
        B[:, idx].astype(float),
        tuple(subsets[i] for i in idx),
        tuple(knots[i] for i in idx),
    )


def evaluate_basis(X, subsets, knots) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    out = np.ones((X.shape[0], len(subsets)))
    for j, (S, k) in enumerate(zip(subsets, knots)):
        for s, kv in zip(S, k):
            out[:, j] *= X[:, s] >= kv
    return out


@numba.njit(cache=True)
def _cd(Xs, r, w, beta, lam, tol, max_passes):
    # Weighted lasso on columns with unit weighted second moment; r is the residual.
    n, p = Xs.shape
    active = np.zeros(p, dtype=np.bool_)
    for j in range(p):
        active[j] = beta[j] != 0.0
    passes = 0
    while passes < max_passes:
        # full sweep
        max_d = 0.0
        for j in range(p):
            d = _update(Xs, r, w, beta, j, lam)
            if d != 0.0:
                active[j] = True
            if d > max_d:
                max_d = d
        passes += 1
        if max_d < tol:
            break
        # active-set sweeps until stable
        while passes < max_passes:
            max_d = 0.0
            for j in range(p):
                if active[j]:
                    d = _update(Xs, r, w, beta, j, lam)
                    if d > max_d:
                        max_d = d
            passes += 1
            if max_d < tol:
                break
    return passes


@numba.njit(cache=True)
def _update(Xs, r, w, beta, j, lam):
    n = Xs.shape[0]
    rho = 0.0
    for i in range(n):
        rho += w[i] * Xs[i, j] * r[i]
    rho += beta[j]
    if rho > lam:
        new = rho - lam
    elif rho < -lam:
        new = rho + lam
    else:
        new = 0.0
    diff = new - beta[j]
    if diff != 0.0:
        for i in range(n):
            r[i] -= diff * Xs[i, j]
        beta[j] = new
    return abs(diff)


def _standardize(B, y, w):
    wn = w / w.sum()
    mu = wn @ B
    Bc = B - mu
    sd = np.sqrt(wn @ (Bc * Bc))
    sd[sd == 0] = 1.0
    ybar = wn @ y
    return Bc / sd, mu, sd, y - ybar, ybar, wn


class _PathState:
    """Warm-started coordinate-descent state for one training set."""

    def __init__(self, B, y, w, tol, max_passes):
        Xs, self.mu, self.sd, yc, self.ybar, self.wn = _standardize(B, y, w)
        self.Xs = np.asfortranarray(Xs)
        self.beta = np.zeros(B.shape[1])
        self.r = yc.copy()
        self.tol = tol * max(np.sqrt(self.wn @ (yc * yc)), 1e-300)
        self.max_passes = max_passes

    def step(self, lam):
        _cd(self.Xs, self.r, self.wn, self.beta, lam, self.tol, self.max_passes)
        return self.beta

    def coef(self):
        return _unstandardize(self.beta, self.mu, self.sd, self.ybar)


def lasso_path(B, y, w, lambdas, tol, max_passes):
    """Coefficients (standardised scale) along ``lambdas`` with warm starts."""
    st = _PathState(B, y, w, tol, max_passes)
    path = np.zeros((len(lambdas), B.shape[1]))
    for k, lam in enumerate(lambdas):
        path[k] = st.step(lam)
    return path, st.mu, st.sd, st.ybar


def lambda_max(B, y, w) -> float:
    Xs, _, _, yc, _, wn = _standardize(B, y, w)
    # tiny inflation so summation-order rounding in the solver cannot activate a column
    return float(np.max(np.abs((wn * yc) @ Xs))) * (1 + 1e-12) if B.shape[1] else 0.0


def _unstandardize(beta, mu, sd, ybar):
    coef = beta / sd
    return coef, ybar - coef @ mu


def fit_hal(X, y, weights=None, config: HalConfig = HalConfig()) -> HalFit:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float).reshape(-1)
    n, p = X.shape
    w = check_weights(weights, n)
    if n < config.n_folds:
        raise ValueError(f"need at least {config.n_folds} rows, got {n}")
    ybar = float(np.average(y, weights=w))
    B, subsets, knots = hal_basis(X, config)
    lmax = lambda_max(B, y, w) if B.shape[1] else 0.0
    if B.shape[1] == 0 or lmax <= 1e-14 * max(1.0, abs(ybar)):
        return HalFit((), (), np.zeros(0), ybar, 0.0, np.zeros(0), np.zeros(0), p, B.shape[1])

    lambdas = lmax * np.logspace(0.0, -config.lambda_decades, config.n_lambda)
    folds = make_folds(n, config.n_folds, config.seed)
    states = [
        (_PathState(B[folds != k], y[folds != k], w[folds != k], config.tol, config.max_passes),
         folds == k)
        for k in range(config.n_folds)
    ]
    cv_risk = np.full(config.n_lambda, np.inf)
    for i, lam in enumerate(lambdas):
        sq = 0.0
        for st, te in states:
            st.step(lam)
            coef, icpt = st.coef()
            sq += w[te] @ (y[te] - B[te] @ coef - icpt) ** 2
        cv_risk[i] = sq / w.sum()
        best = int(np.argmin(cv_risk))
        if config.patience and i - best >= config.patience:
            break
    best = int(np.argmin(cv_risk))
    path, mu, sd, yb = lasso_path(B, y, w, lambdas[: best + 1], config.tol, config.max_passes)
    coef, intercept = _unstandardize(path[-1], mu, sd, yb)
    nz = np.flatnonzero(coef)
    active_counts = (path != 0).sum(axis=1)
    return HalFit(
        subsets=tuple(subsets[i] for i in nz),
        knots=tuple(knots[i] for i in nz),
        coef=coef[nz],
        intercept=float(intercept),
        lambda_=float(lambdas[best]),
        lambdas=lambdas,
        cv_risk=cv_risk,
        n_features=p,
        n_basis=B.shape[1],
        info={"active_counts": active_counts, "std_coef": path[-1], "config": config},
    )


def hal_predict(fit: HalFit, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[1] != fit.n_features:
        raise ValueError(f"X has {X.shape[1]} features, fit expects {fit.n_features}")
    if fit.coef.size == 0:
        return np.full(X.shape[0], fit.intercept)
    return evaluate_basis(X, fit.subsets, fit.knots) @ fit.coef + fit.intercept


class HALRegressor(RegressorMixin, BaseEstimator):
    """Estimator wrapper for :func:`fit_hal`."""

    def __init__(self, max_degree=2, n_lambda=50, n_folds=5, max_basis=2000, tol=1e-7,
                 max_passes=1000, seed=0, patience=10):
        self.patience = patience
        self.max_degree = max_degree
        self.n_lambda = n_lambda
        self.n_folds = n_folds
        self.max_basis = max_basis
        self.tol = tol
        self.max_passes = max_passes
        self.seed = seed

    def fit(self, X, y, sample_weight=None):
        X, y = check_X_y(X, y, y_numeric=True)
        cfg = HalConfig(max_degree=self.max_degree, n_lambda=self.n_lambda, n_folds=self.n_folds,
                        max_basis=self.max_basis, tol=self.tol, max_passes=self.max_passes,
                        seed=self.seed, patience=self.patience)
        self.fit_ = fit_hal(X, y, sample_weight, cfg)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "fit_")
        return hal_predict(self.fit_, check_array(X))
