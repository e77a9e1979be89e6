"""Input validation helpers shared by the estimators."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import ShapeMismatch


def as_mask_matrix(X) -> np.ndarray:
    """2D float array of stimulus masks, one row per sample."""
    X = check_array(X, dtype=np.float64, ensure_2d=False)
    if X.ndim == 1:
        X = X[None, :]
    return X


def as_target_matrix(y, n_rows: int) -> np.ndarray:
    y = check_array(y, dtype=np.float64, ensure_2d=False)
    if y.ndim == 1:
        y = y[None, :] if n_rows == 1 else y[:, None]
    if y.shape[0] != n_rows:
        raise ShapeMismatch(f"{y.shape[0]} target rows for {n_rows} inputs")
    return y
