"""Weighted cross entropy, the swapped prediction objective, LR schedule.

Base-class loss weights are inverse relative frequencies normalized to
mean one; novel classes all share weight one because their frequency is
unknown by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import SplitSpec

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_max: float = 1e-2
    lr_min: float = 1e-5
    warmup_fraction: float = 0.1
    # softmax temperature for training predictions; prototype logits are
    # bounded by the feature norm, so the cross entropy needs sharpening
    # to produce decisive margins against the unconstrained base head
    temperature: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if min(self.epochs, self.batch_size) < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not (0.0 <= self.warmup_fraction < 1.0):
            raise ValueError("warmup_fraction must be in [0, 1)")
        if min(self.lr_max, self.lr_min, self.momentum, self.weight_decay) < 0:
            raise ValueError("optimizer settings must be non-negative")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True)
class LossWeights:
    """Per-class weights over the combined base+novel label space."""

    base_weights: dict  # base class id -> weight, mean 1 over base classes
    novel_weight: float = 1.0

    def __post_init__(self):
        if any(w <= 0 for w in self.base_weights.values()) or self.novel_weight <= 0:
            raise ValueError("loss weights must be positive")
        if self.base_weights:
            mean = sum(self.base_weights.values()) / len(self.base_weights)
            if abs(mean - 1.0) > 1e-9:
                raise ValueError(f"base weights must average 1, got {mean}")

    def vector(self, base_order, n_novel_slots: int) -> np.ndarray:
        base = [self.base_weights[c] for c in base_order]
        return np.array(base + [self.novel_weight] * n_novel_slots)


def compute_loss_weights(clouds, split: SplitSpec) -> LossWeights:
    """Inverse relative-frequency base weights from training occurrences."""
    base_order = sorted(split.base_classes)
    counts = {c: 0 for c in base_order}
    for cloud in clouds:
        ids, n = np.unique(cloud.labels, return_counts=True)
        for cid, cnt in zip(ids, n):
            if cid in counts:
                counts[int(cid)] += int(cnt)
    total = sum(counts.values())
    if total == 0:
        return LossWeights({c: 1.0 for c in base_order})
    # absent base classes fall back to the strongest reweighting present
    inv = {c: (total / cnt) if cnt > 0 else 0.0 for c, cnt in counts.items()}
    fallback = max(inv.values()) if any(v > 0 for v in inv.values()) else 1.0
    inv = {c: (v if v > 0 else fallback) for c, v in inv.items()}
    mean = sum(inv.values()) / len(inv)
    return LossWeights({c: v / mean for c, v in inv.items()})


def weighted_ce(pred, target, weights) -> "ad.Tensor":
    """Mean over points of -sum_c w_c t_c log q_c, log clamped at 1e-12.

    ``pred`` may be an autodiff tensor (columns are predicted
    distributions) so the loss can be differentiated; ``target`` and
    ``weights`` are constants.
    """
    pred_t = pred if isinstance(pred, ad.Tensor) else ad.constant(np.asarray(pred, dtype=np.float64))
    target = np.asarray(target, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if target.shape != pred_t.data.shape:
        raise ad.ShapeError(
            f"weighted_ce: prediction {pred_t.data.shape} vs target {target.shape}"
        )
    if weights.shape[0] != target.shape[0]:
        raise ad.ShapeError("weighted_ce: one weight per class required")
    m = target.shape[1]
    if m == 0:
        return ad.constant(0.0)
    wt = ad.constant(weights[:, None] * target)
    return ad.mul(ad.sum_all(ad.mul(wt, ad.log(pred_t, floor=LOG_FLOOR))), -1.0 / m)


def swapped_loss(pred_a, pred_b, target_a, target_b, weights) -> "ad.Tensor":
    """Cross-view consistency: each view is scored against the other
    view's targets and the two terms are summed."""
    pa = pred_a if isinstance(pred_a, ad.Tensor) else ad.constant(pred_a)
    pb = pred_b if isinstance(pred_b, ad.Tensor) else ad.constant(pred_b)
    if pa.data.shape != pb.data.shape:
        raise ad.ShapeError(
            f"swapped_loss: view shapes differ, {pa.data.shape} vs {pb.data.shape}"
        )
    return ad.add(weighted_ce(pa, target_b, weights), weighted_ce(pb, target_a, weights))


def lr_at(cfg: TrainConfig, step: int, total_steps: int) -> float:
    """Linear warm-up to lr_max, then cosine annealing to lr_min.

    The last step of training (total_steps - 1) lands exactly on lr_min.
    """
    if not (0 <= step <= total_steps):
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = int(round(cfg.warmup_fraction * total_steps))
    if step < warmup:
        return cfg.lr_max * step / warmup
    span = max(1, total_steps - 1 - warmup)
    progress = min(1.0, (step - warmup) / span)
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + np.cos(np.pi * progress))


class SGD:
    """SGD with momentum and decoupled-from-schedule weight decay."""

    def __init__(self, params: dict, momentum: float, weight_decay: float):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float):
        for name, p in self.params.items():
            g = p.grad + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data -= lr * v

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()
