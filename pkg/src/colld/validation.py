"""Input validation shared by the estimators and the functional API."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import ConfigurationError, NumericError, UsageError


def check_matrix(values, name: str = "X", dtype=np.float32) -> np.ndarray:
    """A finite 2-D float array with at least one row and column."""
    try:
        return check_array(values, dtype=dtype, ensure_2d=True, ensure_all_finite=True, copy=False)
    except ValueError as exc:
        if "NaN" in str(exc) or "infinity" in str(exc):
            raise NumericError(f"{name}: {exc}") from exc
        raise ConfigurationError(f"{name}: {exc}") from exc


def check_sequences(X, name: str = "X") -> list:
    """Accept one sequence or a list of sequences; return a list."""
    from .features import FeatureSequence

    if isinstance(X, (FeatureSequence, np.ndarray)):
        X = [X]
    X = list(X)
    if not X:
        raise UsageError(f"{name}: no sequences given")
    return X


def sequence_values(seq) -> np.ndarray:
    from .features import FeatureSequence

    if isinstance(seq, FeatureSequence):
        return seq.values
    return check_matrix(seq)


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or int(value) != value or value < minimum:
        raise UsageError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_probability(value, name: str) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise UsageError(f"{name} must lie in [0, 1], got {value}")
    return value
