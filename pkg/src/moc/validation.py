"""Small input-validation helpers shared by the estimators and environments."""

from __future__ import annotations

import numbers

import numpy as np


def check_random_state(seed) -> np.random.Generator:
    """Turn ``seed`` into a :class:`numpy.random.Generator`.

    Accepts ``None``, an int, a ``SeedSequence`` or an existing generator
    (returned unchanged so callers can share a stream).
    """
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None or isinstance(seed, (numbers.Integral, np.random.SeedSequence)):
        return np.random.default_rng(seed)
    raise ValueError(f"{seed!r} cannot be used to seed a numpy Generator")


def check_probability(value, name: str, *, low_open: bool = False, high_open: bool = False) -> float:
    value = float(value)
    ok_low = value > 0.0 if low_open else value >= 0.0
    ok_high = value < 1.0 if high_open else value <= 1.0
    if not (ok_low and ok_high and np.isfinite(value)):
        lo = "(" if low_open else "["
        hi = ")" if high_open else "]"
        raise ValueError(f"{name} must lie in {lo}0, 1{hi}, got {value}")
    return value


def check_positive(value, name: str) -> float:
    value = float(value)
    if not (value > 0.0 and np.isfinite(value)):
        raise ValueError(f"{name} must be a finite positive number, got {value}")
    return value


def check_count(value, name: str, minimum: int = 1) -> int:
    if not isinstance(value, numbers.Integral) or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_finite(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_distribution(p, name: str, atol: float = 1e-12) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if np.any(p < 0) or abs(p.sum() - 1.0) > atol:
        raise ValueError(f"{name} is not a probability vector (sum={p.sum()!r})")
    return p


def sample_index(p, rng: np.random.Generator) -> int:
    """Draw an index from a small probability vector by inverse CDF.

    Much cheaper than ``rng.choice`` for the handful of actions/options
    used here; consumes exactly one uniform from ``rng``.
    """
    u = rng.random()
    acc = 0.0
    last = len(p) - 1
    for i in range(last):
        acc += p[i]
        if u < acc:
            return i
    return last
