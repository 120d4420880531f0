"""Small shared helpers: fold assignment, seeds, weight validation."""

from __future__ import annotations

import numpy as np


def make_folds(n: int, k: int, seed=0) -> np.ndarray:
    """Random assignment of ``n`` rows to ``k`` folds with sizes differing by at most one."""
    if k < 2:
        raise ValueError("need at least 2 folds")
    if n < k:
        raise ValueError(f"cannot split {n} rows into {k} folds")
    rng = np.random.default_rng(seed)
    folds = np.arange(n) % k
    rng.shuffle(folds)
    return folds


def check_weights(weights, n: int) -> np.ndarray:
    if weights is None:
        return np.ones(n)
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.shape[0] != n:
        raise ValueError(f"weights has length {w.shape[0]}, expected {n}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    return w


def derive_seed(master: int, *index: int) -> np.random.SeedSequence:
    """Deterministic child seed for position ``index`` under ``master``."""
    return np.random.SeedSequence(entropy=int(master), spawn_key=tuple(int(i) for i in index))
