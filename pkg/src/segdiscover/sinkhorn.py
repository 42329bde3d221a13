"""Entropic optimal-transport pseudo-labelling.

``sinkhorn_assign`` projects a prototype/point similarity matrix onto
the transportation polytope with uniform marginals (1/rho per prototype
row, 1/m per point column) by alternating renormalization. Each
iteration normalizes prototype rows first and point columns last, so
the per-point marginal is exact at output, matching the per-point
rescale applied downstream; the row constraint is the equipartition
side that prevents cluster collapse and tightens with iteration count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_TINY = 1e-300


@dataclass(frozen=True)
class EpsilonSchedule:
    """Linear decay of the assignment smoothness over training."""

    eps_start: float = 0.3
    eps_end: float = 0.05
    total_epochs: int = 10

    def __post_init__(self):
        if not (self.eps_start >= self.eps_end > 0.0):
            raise ValueError(f"need eps_start >= eps_end > 0, got {self.eps_start}, {self.eps_end}")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be positive")


def epsilon_at(schedule: EpsilonSchedule, epoch: int) -> float:
    """Smoothness at a given epoch: linear from start to end, clamped."""
    if schedule.total_epochs <= 1:
        return schedule.eps_start
    t = epoch / (schedule.total_epochs - 1)
    eps = schedule.eps_start + (schedule.eps_end - schedule.eps_start) * t
    return float(min(schedule.eps_start, max(schedule.eps_end, eps)))


def sinkhorn_assign(scores, eps: float, n_iters: int = 3) -> np.ndarray:
    """Soft assignment of points (columns) to prototypes (rows).

    ``scores`` is rho x m (queue columns, if any, already appended). The
    exponentials are computed with the per-column max subtracted, so eps
    down to 0.05 is safe for scores well outside the unit range.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] < 1 or scores.shape[1] < 1:
        raise ValueError(f"scores must be a non-empty 2-D matrix, got shape {scores.shape}")
    if np.any(np.isnan(scores)):
        raise ValueError("scores contain NaN")
    if eps <= 0.0:
        raise ValueError(f"eps must be positive, got {eps}")
    rho, m = scores.shape
    q = np.exp((scores - scores.max(axis=0, keepdims=True)) / eps)
    for _ in range(n_iters):
        q *= (1.0 / rho) / np.maximum(q.sum(axis=1, keepdims=True), _TINY)
        q *= (1.0 / m) / np.maximum(q.sum(axis=0, keepdims=True), _TINY)
    return q


def pseudo_labels_from(q: np.ndarray, m_batch: int) -> np.ndarray:
    """Per-point class distributions for the first ``m_batch`` columns.

    Queue columns sit past ``m_batch`` and are dropped; each kept column
    is rescaled to sum to one.
    """
    if m_batch > q.shape[1]:
        raise ValueError(f"m_batch {m_batch} exceeds {q.shape[1]} assignment columns")
    kept = q[:, :m_batch].copy()
    kept /= np.maximum(kept.sum(axis=0, keepdims=True), _TINY)
    return kept
