"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from . import codec


def check_token_slices(X, slice_len: int | None = None) -> np.ndarray:
    """2-d array of token ids, each row one fixed-length slice."""
    arr = check_array(X, dtype=np.int64, ensure_2d=True, ensure_min_samples=1, ensure_min_features=2)
    if arr.min() < 0 or arr.max() >= codec.VOCAB_SIZE:
        raise ValueError(f"token ids must lie in [0, {codec.VOCAB_SIZE})")
    if slice_len is not None and arr.shape[1] != slice_len:
        raise ValueError(f"slices have length {arr.shape[1]}, expected {slice_len}")
    return arr


def check_contexts(X) -> list[np.ndarray]:
    """A sequence of 1-d token streams, each ending at an action-prediction position."""
    if isinstance(X, np.ndarray) and X.ndim == 1:
        X = [X]
    out = []
    for i, seq in enumerate(X):
        arr = np.asarray(seq)
        if arr.ndim != 1 or len(arr) == 0 or not np.issubdtype(arr.dtype, np.integer):
            raise ValueError(f"context {i} must be a non-empty 1-d integer array")
        if arr.min() < 0 or arr.max() >= codec.VOCAB_SIZE:
            raise ValueError(f"context {i} has token ids outside [0, {codec.VOCAB_SIZE})")
        if arr[-1] != codec.EHI or len(arr) < 3 or arr[-2] != codec.ROLE_ACT:
            raise ValueError(f"context {i} does not end at an action position")
        out.append(arr.astype(np.int64))
    if not out:
        raise ValueError("no contexts given")
    return out


def check_probability(name: str, value: float, *, open_low: bool = False, closed_high: bool = True) -> float:
    v = float(value)
    low_ok = v > 0 if open_low else v >= 0
    high_ok = v <= 1 if closed_high else v < 1
    if not (low_ok and high_ok):
        raise ValueError(f"{name}={value} out of range")
    return v
