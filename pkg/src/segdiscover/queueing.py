"""Class-balanced feature queue and percentile-based point selection.

The queue holds novel-point features from past iterations in one FIFO
ring buffer per predicted class, so batches missing a class can still
borrow columns for the transport step. The selection function keeps,
per predicted class, the points whose class probability reaches that
class's p-th percentile (nearest rank), an adaptive threshold that
tracks how confident the model currently is.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class QueueConfig:
    capacity: int = 1024  # per bucket
    insert_fraction: float = 0.1
    sample_per_class: int = 64

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be positive")
        if not (0.0 <= self.insert_fraction <= 1.0):
            raise ValueError("insert_fraction must be in [0, 1]")


@dataclass
class SelectionResult:
    kept_indices: np.ndarray  # sorted point indices into the scored set
    thresholds: dict  # class id -> tau_c (classes with no argmax points absent)


def select_phi(class_probs: np.ndarray, p: float, features: np.ndarray | None = None) -> SelectionResult:
    """Keep reliable points per predicted class.

    ``class_probs`` is (n_classes, m) with columns summing to one. For
    each class c, tau_c is the p-th percentile (nearest rank) of the max
    probabilities of points whose argmax is c; points at or above tau_c
    are kept. p = 0 keeps everything.
    """
    probs = np.asarray(class_probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ValueError(f"class_probs must be 2-D, got shape {probs.shape}")
    if not (0.0 <= p < 1.0):
        raise ValueError(f"percentile p must be in [0, 1), got {p}")
    colsums = probs.sum(axis=0)
    if probs.shape[1] and (np.any(probs < -1e-9) or np.any(np.abs(colsums - 1.0) > 1e-6)):
        raise ValueError("class_probs columns must be distributions summing to 1")
    if features is not None and features.shape[1] != probs.shape[1]:
        raise ValueError("features and class_probs disagree on point count")

    winners = probs.argmax(axis=0)
    confidence = probs.max(axis=0)
    kept = []
    thresholds = {}
    for c in range(probs.shape[0]):
        members = np.flatnonzero(winners == c)
        if members.size == 0:
            continue
        ranked = np.sort(confidence[members])
        rank = max(1, int(np.ceil(p * members.size)))
        tau = ranked[rank - 1]
        thresholds[c] = float(tau)
        kept.append(members[confidence[members] >= tau])
    indices = np.sort(np.concatenate(kept)) if kept else np.array([], dtype=np.intp)
    return SelectionResult(indices, thresholds)


@dataclass
class FeatureQueue:
    """Per-class FIFO buffers of unit-norm feature columns.

    With ``balanced=False`` the queue degrades to a single FIFO buffer
    with no per-class bookkeeping (the unbalanced ablation variant).
    """

    class_ids: tuple
    capacity: int
    balanced: bool = True
    _buckets: dict = field(init=False)

    def __post_init__(self):
        keys = tuple(sorted(self.class_ids)) if self.balanced else (None,)
        self._buckets = {key: deque(maxlen=self.capacity) for key in keys}

    def sizes(self) -> dict:
        return {key: len(bucket) for key, bucket in self._buckets.items()}

    def total(self) -> int:
        return sum(len(b) for b in self._buckets.values())

    def insert(self, features: np.ndarray, predicted_classes: np.ndarray,
               insert_fraction: float, rng: np.random.Generator):
        """Push a random fraction of candidate columns per predicted class.

        The count per class is ceil(fraction * n), sampled without
        replacement; FIFO eviction keeps every bucket within capacity.
        """
        features = np.asarray(features, dtype=np.float64)
        if features.size == 0:
            return
        predicted_classes = np.asarray(predicted_classes)
        if predicted_classes.shape[0] != features.shape[1]:
            raise ValueError("one predicted class per feature column required")
        if insert_fraction <= 0.0:
            return
        for key, bucket in self._buckets.items():
            members = (
                np.flatnonzero(predicted_classes == key)
                if self.balanced
                else np.arange(features.shape[1])
            )
            if members.size == 0:
                continue
            count = min(members.size, int(np.ceil(insert_fraction * members.size)))
            # sorted so FIFO order follows arrival (column) order
            chosen = np.sort(rng.choice(members, size=count, replace=False))
            for idx in chosen:
                bucket.append(features[:, idx].copy())

    def sample(self, per_class_count: int, rng: np.random.Generator) -> np.ndarray:
        """Up to ``per_class_count`` columns per bucket, uniform without
        replacement; returns (D, total), possibly zero-width."""
        columns = []
        budget = per_class_count if self.balanced else per_class_count * max(1, len(self.class_ids))
        for key in self._buckets:
            bucket = self._buckets[key]
            if not bucket:
                continue
            take = min(budget, len(bucket))
            chosen = rng.choice(len(bucket), size=take, replace=False)
            columns.extend(bucket[i] for i in sorted(chosen))
        if not columns:
            return np.zeros((0, 0))
        return np.stack(columns, axis=1)
