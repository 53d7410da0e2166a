"""OSPA distance and cardinality bookkeeping."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass(frozen=True)
class OspaParams:
    cutoff: float = 30.0
    order: float = 1.0

    def __post_init__(self):
        if self.cutoff <= 0 or self.order < 1:
            raise ValueError("OSPA needs cutoff > 0 and order >= 1")


def optimal_assignment(cost) -> tuple[list[tuple[int, int]], float]:
    """Minimum-cost one-to-one assignment covering the smaller side."""
    cost = np.asarray(cost, dtype=float)
    if cost.size == 0:
        return [], 0.0
    rows, cols = linear_sum_assignment(cost)
    return list(zip(rows.tolist(), cols.tolist())), float(cost[rows, cols].sum())


def _positions(points) -> np.ndarray:
    pts = [getattr(p, "position", p) for p in points]
    return np.asarray(pts, dtype=float).reshape(-1, 2)


def ospa(est, truth, params: OspaParams = OspaParams()) -> float:
    """OSPA distance between two finite sets of 2-D positions."""
    X, Y = _positions(est), _positions(truth)
    m, n = len(X), len(Y)
    if m == 0 and n == 0:
        return 0.0
    c, p = params.cutoff, params.order
    if m == 0 or n == 0:
        return float(c)
    if m > n:
        X, Y, m, n = Y, X, n, m
    d = np.linalg.norm(X[:, None, :] - Y[None, :, :], axis=-1)
    _, cost = optimal_assignment(np.minimum(d, c) ** p)
    return float(((cost + c**p * (n - m)) / n) ** (1.0 / p))


def cardinality_error_series(estimates, truth) -> list[tuple[int, int]]:
    """Per-step ``(|estimate|, |truth|)``."""
    if len(estimates) != len(truth):
        raise ValueError("estimate and truth series differ in length")
    return [(len(e), len(t)) for e, t in zip(estimates, truth)]
