"""Exact linear assignment on small square score matrices.

The solver runs the O(n^3) shortest-augmenting-path Hungarian method for
the optimum value, then pins rows one by one to the lowest feasible
column index, so among all maximizing assignments the lexicographically
smallest (row 0 first) is returned deterministically.
"""

from __future__ import annotations

import numpy as np

_TOL = 1e-9


def _min_cost(cost: np.ndarray) -> float:
    """Optimal total cost of a square assignment problem (minimization)."""
    n = cost.shape[0]
    if n == 0:
        return 0.0
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.intp)
    way = np.zeros(n + 1, dtype=np.intp)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = np.inf
            j1 = 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    total = 0.0
    for j in range(1, n + 1):
        if p[j] != 0:
            total += cost[p[j] - 1, j - 1]
    return total


def _max_value(scores: np.ndarray) -> float:
    return -_min_cost(-scores)


def hungarian_max(scores) -> list[int]:
    """Assignment a[row] = col maximizing the summed score.

    Ties between equally good assignments resolve to the lexicographically
    smallest column sequence.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ValueError(f"expected a square matrix, got {scores.shape}")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    n = scores.shape[0]
    remaining_cols = list(range(n))
    sub = scores
    assignment: list[int] = []
    target = _max_value(scores)
    for _ in range(n):
        chosen = None
        for k, col in enumerate(remaining_cols):
            rest = np.delete(np.delete(sub, 0, axis=0), k, axis=1)
            value = sub[0, k] + _max_value(rest)
            if value >= target - _TOL * max(1.0, abs(target)):
                chosen = k
                break
        assert chosen is not None, "no feasible column reaches the optimal value"
        assignment.append(remaining_cols[chosen])
        target -= sub[0, chosen]
        sub = np.delete(np.delete(sub, 0, axis=0), chosen, axis=1)
        del remaining_cols[chosen]
    return assignment
