"""Input-validation helpers used across the package.

Each checker either returns a normalised value or raises
:class:`~shufflehist.exceptions.DomainError` with a message naming the
offending argument.
"""

from __future__ import annotations

import math
import numbers
from typing import Any

import numpy as np

from shufflehist.exceptions import DomainError

__all__ = [
    "check_bits",
    "check_dimension",
    "check_items",
    "check_nonneg_int",
    "check_positive_int",
    "check_probability",
    "check_positive",
    "check_rng",
    "normalize_mode",
]


def _is_integral(value: Any) -> bool:
    if isinstance(value, bool):
        return False
    if isinstance(value, numbers.Integral):
        return True
    return isinstance(value, numbers.Real) and float(value).is_integer()


def check_positive_int(value: Any, name: str) -> int:
    """Return ``value`` as an ``int`` if it is an integer >= 1."""
    if not _is_integral(value) or int(value) < 1:
        raise DomainError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_nonneg_int(value: Any, name: str) -> int:
    """Return ``value`` as an ``int`` if it is an integer >= 0."""
    if not _is_integral(value) or int(value) < 0:
        raise DomainError(f"{name} must be a non-negative integer, got {value!r}")
    return int(value)


def check_dimension(d: Any) -> int:
    return check_positive_int(d, "d")


def check_positive(value: Any, name: str) -> float:
    """Return ``value`` as a finite float that is strictly positive."""
    try:
        out = float(value)
    except (TypeError, ValueError) as exc:
        raise DomainError(f"{name} must be a real number, got {value!r}") from exc
    if not math.isfinite(out) or out <= 0.0:
        raise DomainError(f"{name} must be finite and > 0, got {value!r}")
    return out


def check_probability(
    value: Any,
    name: str,
    *,
    low_open: bool = False,
    high: float = 1.0,
    high_open: bool = False,
) -> float:
    """Validate a probability-like scalar.

    Args:
        value: The candidate value.
        name: Argument name used in error messages.
        low_open: Exclude 0 from the admissible range.
        high: Upper end of the admissible range.
        high_open: Exclude ``high`` from the admissible range.

    Returns:
        The value as a Python float.
    """
    try:
        p = float(value)
    except (TypeError, ValueError) as exc:
        raise DomainError(f"{name} must be a real number, got {value!r}") from exc
    too_low = p <= 0.0 if low_open else p < 0.0
    too_high = p >= high if high_open else p > high
    if math.isnan(p) or too_low or too_high:
        lo = "(0" if low_open else "[0"
        hi = f"{high})" if high_open else f"{high}]"
        raise DomainError(f"{name} must lie in {lo}, {hi}, got {value!r}")
    return p


def check_items(items: Any, d: int, name: str = "items") -> np.ndarray:
    """Validate a vector of 1-based item ids and return it as ``int64``.

    Accepts any array-like (lists, numpy arrays, single-column 2-D arrays
    as produced by scikit-learn style callers).
    """
    arr = np.asarray(items)
    if arr.ndim == 2 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 1:
        raise DomainError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.issubdtype(arr.dtype, np.floating) or not np.all(np.mod(arr, 1) == 0):
            raise DomainError(f"{name} must contain integers")
    arr = arr.astype(np.int64, copy=False)
    if arr.size and (arr.min() < 1 or arr.max() > d):
        raise DomainError(f"{name} must lie in [1, {d}]")
    return arr


def check_bits(bits: Any, name: str = "x") -> np.ndarray:
    """Validate a binary message and return it as a ``uint8`` vector.

    Strings such as ``"0101"`` are accepted as a convenience.
    """
    if isinstance(bits, str):
        if not bits or set(bits) - {"0", "1"}:
            raise DomainError(f"{name} must be a non-empty string of 0/1, got {bits!r}")
        return np.frombuffer(bits.encode("ascii"), dtype=np.uint8) - ord("0")
    arr = np.asarray(bits)
    if arr.ndim != 1 or arr.size == 0:
        raise DomainError(f"{name} must be a non-empty 1-D bit vector")
    if not np.all((arr == 0) | (arr == 1)):
        raise DomainError(f"{name} must contain only 0 and 1")
    return arr.astype(np.uint8)


def check_rng(random_state: Any = None) -> np.random.Generator:
    """Turn ``None``, an int seed or a Generator into a ``numpy`` Generator."""
    if isinstance(random_state, np.random.Generator):
        return random_state
    if random_state is None or _is_integral(random_state):
        return np.random.default_rng(None if random_state is None else int(random_state))
    if isinstance(random_state, np.random.SeedSequence):
        return np.random.default_rng(random_state)
    raise DomainError(f"cannot build a random generator from {random_state!r}")


_MODES = {
    "per_bin": "per_bin",
    "per-bin": "per_bin",
    "perbin": "per_bin",
    "max": "max",
    "maximum": "max",
}


def normalize_mode(mode: str) -> str:
    """Map the accepted spellings of an accuracy mode onto ``per_bin``/``max``."""
    try:
        return _MODES[str(mode).lower()]
    except KeyError:
        raise DomainError(f"mode must be 'per_bin' or 'max', got {mode!r}") from None
