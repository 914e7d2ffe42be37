"""Input validation helpers shared by the public functions and estimators."""

import numbers

import numpy as np


class ParameterError(ValueError):
    """Raised when a model or solver parameter is outside its valid range."""


def check_positive(value, name, strict=True):
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ParameterError(f"{name} must be a finite real number, got {value!r}")
    if strict and value <= 0:
        raise ParameterError(f"{name} must be > 0, got {value!r}")
    if not strict and value < 0:
        raise ParameterError(f"{name} must be >= 0, got {value!r}")
    return float(value)


def check_count(value, name, minimum=1):
    if isinstance(value, (bool, np.bool_)) or not isinstance(value, numbers.Integral):
        raise ParameterError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ParameterError(f"{name} must be >= {minimum}, got {value!r}")
    return int(value)


def check_fraction(value, name):
    value = check_positive(value, name, strict=False)
    if value > 1:
        raise ParameterError(f"{name} must lie in [0, 1], got {value!r}")
    return value


def check_rng(seed):
    """Turn ``None``, an int, a ``SeedSequence`` or a ``Generator`` into a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def check_budget_vector(value, size, name):
    arr = np.broadcast_to(np.asarray(value, dtype=float), (size,)).copy()
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise ParameterError(f"{name} must be finite and strictly positive")
    return arr


def check_complex_array(value, ndim, name):
    arr = np.asarray(value)
    if arr.ndim != ndim:
        raise ParameterError(f"{name} must have {ndim} dimensions, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} contains non-finite entries")
    return arr.astype(complex, copy=False)
