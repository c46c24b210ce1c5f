"""Input validation helpers shared across the package.

Small, strict checkers that raise ``ValueError`` subclasses with the
offending field named, so callers (and the CLI) can report single-line
machine-parsable errors.
"""

from __future__ import annotations

import numpy as np


def check_positive_int_triple(value, field: str) -> tuple[int, int, int]:
    """Coerce to a (z, y, x)-ordered triple of positive ints."""
    try:
        t = tuple(int(v) for v in value)
    except (TypeError, ValueError):
        raise ValueError(f"{field}: expected a triple of integers, got {value!r}")
    if len(t) != 3 or any(v <= 0 for v in t):
        raise ValueError(f"{field}: expected three positive integers, got {value!r}")
    return t


def check_positive_float_triple(value, field: str) -> tuple[float, float, float]:
    try:
        t = tuple(float(v) for v in value)
    except (TypeError, ValueError):
        raise ValueError(f"{field}: expected a triple of reals, got {value!r}")
    if len(t) != 3 or any(not np.isfinite(v) or v <= 0 for v in t):
        raise ValueError(f"{field}: expected three positive finite reals, got {value!r}")
    return t


def check_finite(arr: np.ndarray, field: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise ValueError(f"{field}: contains non-finite values (NaN or Inf)")
    return arr


def check_binary(arr: np.ndarray, field: str) -> np.ndarray:
    """Assert every entry is 0 or 1."""
    bad = ~np.isin(arr, (0, 1))
    if bad.any():
        offender = arr[bad].ravel()[0]
        raise ValueError(f"{field}: values must be 0 or 1, found {offender!r}")
    return arr


def check_same_dims(a_shape, b_shape, field: str) -> None:
    if tuple(a_shape) != tuple(b_shape):
        raise ValueError(f"{field}: dims mismatch, {tuple(a_shape)} vs {tuple(b_shape)}")


def check_probabilities(arr: np.ndarray, field: str) -> np.ndarray:
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{field}: probabilities must lie in [0, 1]")
    return arr
