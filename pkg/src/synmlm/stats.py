"""Distribution distance and correlation utilities."""

from __future__ import annotations

from collections.abc import Mapping, Sequence

import numpy as np

from .errors import InvalidArgumentError, UndefinedCorrelationError

NORMALIZATION_TOL = 1e-6


def tv_distance(p, q) -> float:
    """Total variation distance between two distributions on the same support.

    Both arguments are probability vectors of equal length, each summing to
    one within 1e-6. Returns half the L1 distance, a value in [0, 1].
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.ndim != 1 or q.ndim != 1 or p.shape != q.shape:
        raise InvalidArgumentError(f"mismatched supports: {p.shape} vs {q.shape}")
    for name, v in (("p", p), ("q", q)):
        if abs(v.sum() - 1.0) > NORMALIZATION_TOL:
            raise InvalidArgumentError(f"{name} is not normalized (sum={v.sum():.8f})")
        if (v < 0).any():
            raise InvalidArgumentError(f"{name} has negative entries")
    return float(0.5 * np.abs(p - q).sum())


def tv_distance_mapping(p: Mapping, q: Mapping) -> float:
    """Total variation distance between sparse distributions keyed by outcome."""
    support = sorted(set(p) | set(q))
    pv = np.array([p.get(s, 0.0) for s in support], dtype=np.float64)
    qv = np.array([q.get(s, 0.0) for s in support], dtype=np.float64)
    return tv_distance(pv, qv)


def pearson(pairs: Sequence[tuple[float, float]]) -> float:
    """Sample Pearson correlation coefficient of (u, v) pairs.

    Raises UndefinedCorrelationError when either coordinate has zero
    variance; the caller decides how to report that, it is never a silent 0.
    """
    if len(pairs) < 2:
        raise InvalidArgumentError("pearson needs at least 2 pairs")
    u = np.array([a for a, _ in pairs], dtype=np.float64)
    v = np.array([b for _, b in pairs], dtype=np.float64)
    du = u - u.mean()
    dv = v - v.mean()
    su = np.sqrt((du * du).sum())
    sv = np.sqrt((dv * dv).sum())
    if su == 0.0 or sv == 0.0:
        raise UndefinedCorrelationError("zero variance in at least one coordinate")
    return float((du * dv).sum() / (su * sv))
