"""Small input-validation helpers in the spirit of ``sklearn.utils.validation``."""

import numbers

import numpy as np

from .exceptions import InvalidInputError, InvalidParameterError


def check_positive(value, name, *, strict=True):
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise InvalidParameterError(f"{name} must be a finite real number, got {value!r}")
    if strict and value <= 0:
        raise InvalidParameterError(f"{name} must be > 0, got {value!r}")
    if not strict and value < 0:
        raise InvalidParameterError(f"{name} must be >= 0, got {value!r}")
    return float(value)


def check_int(value, name, *, min_value=None, max_value=None):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise InvalidParameterError(f"{name} must be an integer, got {value!r}")
    if min_value is not None and value < min_value:
        raise InvalidParameterError(f"{name} must be >= {min_value}, got {value}")
    if max_value is not None and value > max_value:
        raise InvalidParameterError(f"{name} must be <= {max_value}, got {value}")
    return int(value)


def check_range(pair, name, *, min_value=0):
    """Validate an inclusive ``(low, high)`` integer range."""
    try:
        low, high = pair
    except (TypeError, ValueError):
        raise InvalidParameterError(f"{name} must be a (low, high) pair, got {pair!r}") from None
    low = check_int(low, f"{name}[0]", min_value=min_value)
    high = check_int(high, f"{name}[1]", min_value=low)
    return low, high


def check_image(image, name="image", *, channels=3):
    """Return ``image`` as a float64 ``H x W x C`` array, validating shape."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != channels:
        raise InvalidInputError(f"{name} must have shape (H, W, {channels}), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidInputError(f"{name} must be non-empty, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def check_matrix(x, name, *, ndim=2):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != ndim:
        raise InvalidInputError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    return arr
