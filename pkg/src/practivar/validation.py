"""Input validation helpers used by the estimators and pipeline functions."""

import numpy as np

from .errors import ContractError


def as_float_array(x, name="array"):
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return arr


def check_finite(arr, name="array"):
    arr = np.asarray(arr, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains non-finite values")
    return arr


def check_positive(arr, name="array", strict=True):
    arr = check_finite(arr, name)
    if strict and np.any(arr <= 0):
        raise ContractError(f"{name} must be strictly positive")
    if not strict and np.any(arr < 0):
        raise ContractError(f"{name} must be nonnegative")
    return arr


def check_probability(p, name="probability", allow_one=True):
    p = float(p)
    hi_ok = p <= 1 if allow_one else p < 1
    if not (0 <= p and hi_ok):
        raise ContractError(f"{name} must lie in [0, 1{']' if allow_one else ')'}, got {p}")
    return p


def check_probability_vector(probs, name="probabilities", tol=1e-12):
    probs = check_finite(probs, name)
    if np.any(probs < 0):
        raise ContractError(f"{name} must be nonnegative")
    total = probs.sum()
    if abs(total - 1.0) > tol:
        raise ContractError(f"{name} must sum to 1 within {tol} (got {total!r})")
    return probs


def check_distance_matrix(d, name="distance matrix", tol=1e-10):
    """Symmetric, zero-diagonal, nonnegative square matrix."""
    d = np.asarray(d, dtype=float)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ContractError(f"{name} must be square, got shape {d.shape}")
    if not np.all(np.isfinite(d)):
        raise ContractError(f"{name} contains non-finite entries")
    if np.max(np.abs(d - d.T)) > tol:
        raise ContractError(f"{name} must be symmetric")
    if np.max(np.abs(np.diag(d))) > tol:
        raise ContractError(f"{name} must have a zero diagonal")
    if np.any(d < -tol):
        raise ContractError(f"{name} must be nonnegative")
    return 0.5 * (d + d.T)


def check_same_length(name_a, a, name_b, b):
    if len(a) != len(b):
        raise ContractError(f"{name_a} and {name_b} must have equal length "
                            f"({len(a)} vs {len(b)})")
