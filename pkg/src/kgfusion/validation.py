"""Input checks shared by the estimators and the command line."""
from __future__ import annotations

import numbers

import numpy as np

from .corpus import PAD


def check_token_ids(X, vocab_size: int | None = None, max_len: int | None = None) -> np.ndarray:
    """Return ``X`` as a 2-D int64 array of token ids."""
    arr = np.asarray(X)
    if arr.ndim != 2:
        raise ValueError(f"token ids must be a 2-D array, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError("token id array has no rows")
    if arr.dtype.kind not in "iu":
        if arr.dtype.kind != "f" or not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
            raise ValueError("token ids must be integers")
    arr = arr.astype(np.int64)
    if arr.min() < 0:
        raise ValueError("token ids must be non-negative")
    if vocab_size is not None and arr.max() >= vocab_size:
        raise ValueError(f"token id {int(arr.max())} outside a vocabulary of {vocab_size}")
    if max_len is not None and arr.shape[1] > max_len:
        raise ValueError(f"sequence length {arr.shape[1]} exceeds {max_len}")
    return arr


def check_attention_mask(mask, ids: np.ndarray) -> np.ndarray:
    """0/1 mask shaped like ``ids``; ``None`` derives it from padding."""
    if mask is None:
        return (ids != PAD).astype(np.int64)
    mask = np.asarray(mask)
    if mask.shape != ids.shape:
        raise ValueError(f"mask shape {mask.shape} does not match ids {ids.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("attention mask must contain only 0 and 1")
    return mask.astype(np.int64)


def check_class_labels(y, n_samples: int, n_classes: int | None = None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n_samples:
        raise ValueError(f"expected {n_samples} labels in a 1-D array, got shape {y.shape}")
    if y.dtype.kind not in "iu":
        raise ValueError("class labels must be integers")
    if n_classes is not None and y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"label out of range for {n_classes} classes")
    return y.astype(np.int64)


def check_indicator_matrix(Y, n_samples: int) -> np.ndarray:
    Y = np.asarray(Y)
    if Y.ndim != 2 or len(Y) != n_samples:
        raise ValueError(f"expected an [{n_samples}, n_labels] indicator matrix, got shape {Y.shape}")
    if not np.isin(Y, (0, 1)).all():
        raise ValueError("indicator matrix must contain only 0 and 1")
    return Y.astype(np.int64)


def check_positive_int(name: str, value) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_fraction(name: str, value, low_open: bool = False, high_open: bool = True) -> float:
    """Validate ``value`` against [0, 1] with the requested open ends."""
    if isinstance(value, bool) or not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ValueError(f"{name} must be a real number, got {value!r}")
    lo_ok = value > 0 if low_open else value >= 0
    hi_ok = value < 1 if high_open else value <= 1
    if not (lo_ok and hi_ok):
        lo, hi = "(" if low_open else "[", ")" if high_open else "]"
        raise ValueError(f"{name} must lie in {lo}0, 1{hi}, got {value}")
    return float(value)
