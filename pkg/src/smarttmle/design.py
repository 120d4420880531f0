"""Design-matrix builders shared by the censoring and outcome regressions."""

from __future__ import annotations

import numpy as np

from .data import ECOACH, TEXT, WEBAPP, TrialDataset

STAGE0_ARM_COLUMNS = ("a0_text", "a0_webapp")
STAGE1_ARM_COLUMNS = ("text_text", "webapp_webapp", "text_ecoach", "webapp_ecoach")
HISTORY_COLUMNS = ("w0", "y0", "w1", "y1", "w2", "y2")


def stage0_arm_block(a0) -> np.ndarray:
    a0 = np.asarray(a0, dtype=float)
    return np.column_stack([a0 == TEXT, a0 == WEBAPP]).astype(float)


def stage1_arm_block(a0, a1) -> np.ndarray:
    a0 = np.asarray(a0, dtype=float)
    a1 = np.asarray(a1, dtype=float)
    return np.column_stack([
        (a0 == TEXT) & (a1 == TEXT),
        (a0 == WEBAPP) & (a1 == WEBAPP),
        (a0 == TEXT) & (a1 == ECOACH),
        (a0 == WEBAPP) & (a1 == ECOACH),
    ]).astype(float)


def history(data: TrialDataset, through_visit: int) -> np.ndarray:
    """Covariates measured through ``through_visit`` (0, 1 or 2), main terms."""
    cols = HISTORY_COLUMNS[: 2 * (through_visit + 1)]
    return np.column_stack([getattr(data, c) for c in cols])


def stage_design(data: TrialDataset, stage: int, a0, a1=None) -> np.ndarray:
    """Arm indicators plus history for the regression at ``stage``.

    Stage 1 uses the stage-0 arm block and baseline covariates; stages 2 and
    3 use the four stage-1 arm indicators and history through the previous visit.
    """
    if stage == 1:
        return np.column_stack([stage0_arm_block(a0), history(data, 0)])
    return np.column_stack([stage1_arm_block(a0, a1), history(data, stage - 1)])


def stage_columns(stage: int) -> tuple:
    if stage == 1:
        return STAGE0_ARM_COLUMNS + HISTORY_COLUMNS[:2]
    return STAGE1_ARM_COLUMNS + HISTORY_COLUMNS[: 2 * stage]


def varying_columns(X: np.ndarray) -> np.ndarray:
    """Indices of columns that are not constant over the rows of ``X``."""
    if X.shape[0] == 0:
        return np.arange(0)
    return np.flatnonzero(np.ptp(X, axis=0) > 0)
