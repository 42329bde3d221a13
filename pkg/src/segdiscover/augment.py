"""Paired random views for the swapped prediction task.

Both views of a cloud keep point order, so point i in view A is point i
in view B and pseudo-labels can be swapped across views directly. The
augmentation family is rotation about the vertical axis, a global
isotropic scale, and per-point Gaussian jitter; anything that drops or
reorders points would break the correspondence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LabelledCloud


@dataclass(frozen=True)
class AugmentConfig:
    rotate: bool = True
    scale_lo: float = 0.95
    scale_hi: float = 1.05
    jitter_sigma: float = 0.01  # meters

    def __post_init__(self):
        if self.scale_lo > self.scale_hi:
            raise ValueError("scale_lo must not exceed scale_hi")


@dataclass(frozen=True)
class ViewPair:
    view_a: LabelledCloud
    view_b: LabelledCloud


def _augment_once(cloud: LabelledCloud, cfg: AugmentConfig, rng: np.random.Generator) -> LabelledCloud:
    theta = rng.uniform(0.0, 2.0 * np.pi) if cfg.rotate else 0.0
    scale = rng.uniform(cfg.scale_lo, cfg.scale_hi)
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    coords = scale * (cloud.coords @ rot.T)
    if cfg.jitter_sigma > 0.0:
        coords = coords + rng.normal(0.0, cfg.jitter_sigma, coords.shape)
    return LabelledCloud(coords, cloud.labels.copy(), scene_id=cloud.scene_id)


def make_views(cloud: LabelledCloud, rng: np.random.Generator, cfg: AugmentConfig | None = None) -> ViewPair:
    """Two independently augmented views with identical labels."""
    cfg = cfg or AugmentConfig()
    return ViewPair(_augment_once(cloud, cfg, rng), _augment_once(cloud, cfg, rng))
