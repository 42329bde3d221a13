"""Shared per-point feature extractor and segmentation heads.

The extractor is a small dense per-point network: an MLP encodes xyz,
a k-nearest-neighbour mean pools local context, and a final linear map
projects the concatenation to D dimensions, L2-normalized per point.
Novel heads are bias-free linear maps whose weight columns double as the
class prototypes read by the transport solver; the base head carries a
bias. Over-clustering heads are extra bias-free heads with o times the
novel width, discarded at inference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 32  # D
    hidden: int = 64
    knn: int = 16
    heads: int = 5  # H
    overcluster_factor: int = 3  # o

    def __post_init__(self):
        if min(self.feature_dim, self.hidden, self.knn, self.heads) < 1:
            raise ValueError("model dimensions must be positive")
        if self.overcluster_factor < 1:
            raise ValueError("overcluster_factor must be >= 1")


def knn_indices(coords: np.ndarray, k: int) -> np.ndarray:
    """(m, min(k, m-1)) nearest-neighbour indices per point, self excluded,
    distance ties broken by lower point index.

    The neighbour graph is invariant under the augmentation family
    (rotation about z and isotropic scale), so it can be computed once
    per scene and reused across views.
    """
    m = coords.shape[0]
    if m == 1:
        return np.zeros((1, 1), dtype=np.intp)
    k = min(k, m - 1)
    sq = (coords ** 2).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (coords @ coords.T), 0.0)
    np.fill_diagonal(d2, np.inf)
    kth = np.partition(d2, k - 1, axis=1)[:, k - 1:k]
    strict = d2 < kth
    deficit = k - strict.sum(axis=1)
    ties = d2 == kth
    chosen = strict | (ties & (np.cumsum(ties, axis=1) <= deficit[:, None]))
    return np.nonzero(chosen)[1].reshape(m, k)


def knn_mean_matrix(coords: np.ndarray, k: int, neighbours: np.ndarray | None = None) -> np.ndarray:
    """Column-stochastic (m, m) matrix averaging each point's k nearest
    neighbours; right-multiplying features (D, m) by it yields the
    neighbourhood mean per point. A single-point cloud averages itself."""
    if neighbours is None:
        neighbours = knn_indices(coords, k)
    m, kk = neighbours.shape
    mat = np.zeros((m, m))
    np.add.at(mat, (neighbours.reshape(-1), np.repeat(np.arange(m), kk)), 1.0 / kk)
    return mat


class SegmentationModel:
    """Feature extractor plus base, novel, and over-clustering heads."""

    def __init__(self, cfg: ModelConfig, n_base: int, n_novel: int, rng: np.random.Generator):
        self.cfg = cfg
        self.n_base = n_base
        self.n_novel = n_novel
        h, d = cfg.hidden, cfg.feature_dim

        def init(shape, fan_in, name):
            return ad.parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), shape), name)

        self.w1 = init((h, 3), 3, "enc1.w")
        self.b1 = ad.parameter(np.zeros((h, 1)), "enc1.b")
        self.w2 = init((h, h), h, "enc2.w")
        self.b2 = ad.parameter(np.zeros((h, 1)), "enc2.b")
        self.w3 = init((d, 2 * h), 2 * h, "proj.w")
        self.b3 = ad.parameter(np.zeros((d, 1)), "proj.b")
        self.base_w = init((n_base, d), d, "base.w")
        self.base_b = ad.parameter(np.zeros((n_base, 1)), "base.b")
        # Prototype matrices, one D x rho block per head; the same storage
        # is read by the transport solver and by the head logits.
        self.novel_p = [
            init((d, n_novel), d, f"novel{i}.p") for i in range(cfg.heads)
        ]
        self.over_p = [
            init((d, cfg.overcluster_factor * n_novel), d, f"over{i}.p")
            for i in range(cfg.heads)
        ]
        self.selected_head = 0

    def parameters(self) -> dict:
        params = {
            p.name: p
            for p in [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3, self.base_w, self.base_b]
        }
        for p in self.novel_p + self.over_p:
            params[p.name] = p
        return params

    def extract_features(self, coords: np.ndarray, neighbours: np.ndarray | None = None) -> ad.Tensor:
        """(D, m) feature matrix with unit-norm columns for one cloud.

        ``neighbours`` may carry precomputed k-NN indices for the scene;
        by default they are derived from ``coords``.
        """
        coords = np.asarray(coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 3 or coords.shape[0] < 1:
            raise ValueError(f"expected (m, 3) coordinates, got {coords.shape}")
        x = ad.constant(coords.T, name="xyz")
        h1 = ad.relu(ad.add(ad.matmul(self.w1, x), self.b1))
        h2 = ad.relu(ad.add(ad.matmul(self.w2, h1), self.b2))
        mean_mat = knn_mean_matrix(coords, self.cfg.knn, neighbours)
        agg = ad.matmul(h2, ad.constant(mean_mat, name="knn"))
        cat = ad.concat_rows([h2, agg])
        z = ad.add(ad.matmul(self.w3, cat), self.b3)
        return ad.l2_normalize_cols(z)

    def base_logits(self, z: ad.Tensor) -> ad.Tensor:
        return ad.add(ad.matmul(self.base_w, z), self.base_b)

    def novel_logits(self, z: ad.Tensor, head: int) -> ad.Tensor:
        if not (0 <= head < self.cfg.heads):
            raise IndexError(f"head index {head} out of range")
        return ad.matmul(ad.transpose(self.novel_p[head]), z)

    def over_logits(self, z: ad.Tensor, head: int) -> ad.Tensor:
        if not (0 <= head < self.cfg.heads):
            raise IndexError(f"head index {head} out of range")
        return ad.matmul(ad.transpose(self.over_p[head]), z)

    def head_logits(self, z: ad.Tensor, head: int) -> tuple[ad.Tensor, ad.Tensor]:
        return self.base_logits(z), self.novel_logits(z, head)

    def prototypes(self, head: int) -> np.ndarray:
        """The prototype matrix P (D x n_novel) of one novel head."""
        return self.novel_p[head].data

    def predict_slots(self, coords: np.ndarray, head: int | None = None,
                      neighbours: np.ndarray | None = None) -> np.ndarray:
        """Per-point argmax over concatenated base+novel logits.

        Slots 0..n_base-1 are base classes in sorted-id order; slots
        n_base.. are the selected novel head's outputs, to be aligned to
        class ids by the evaluation matching.
        """
        head = self.selected_head if head is None else head
        z = self.extract_features(coords, neighbours)
        logits = np.concatenate(
            [self.base_logits(z).data, self.novel_logits(z, head).data], axis=0
        )
        return logits.argmax(axis=0)

    def state(self) -> dict:
        st = {name: p.data for name, p in self.parameters().items()}
        st["meta.selected_head"] = np.array([[float(self.selected_head)]])
        return st

    def load_state(self, state: dict, strict: bool = True):
        for name, p in self.parameters().items():
            if name in state:
                arr = np.asarray(state[name], dtype=np.float64).reshape(p.data.shape)
                p.data[...] = arr
            elif strict:
                raise KeyError(f"checkpoint missing parameter {name}")
        if "meta.selected_head" in state:
            self.selected_head = int(np.asarray(state["meta.selected_head"]).reshape(-1)[0])

    def save(self, path):
        ad.save_checkpoint(path, self.state())

    def load(self, path, strict: bool = True):
        self.load_state(ad.load_checkpoint(path), strict=strict)


class CombinedHeadModel:
    """Extractor plus a single head over base and novel slots jointly.

    Used by the offline baseline's fine-tuning stage; base slots can be
    seeded from a pretrained base head.
    """

    def __init__(self, cfg: ModelConfig, n_base: int, n_novel: int, rng: np.random.Generator):
        self.backbone = SegmentationModel(cfg, n_base, n_novel, rng)
        d = cfg.feature_dim
        n_all = n_base + n_novel
        self.head_w = ad.parameter(rng.normal(0.0, np.sqrt(2.0 / d), (n_all, d)), "joint.w")
        self.head_b = ad.parameter(np.zeros((n_all, 1)), "joint.b")
        self.n_base = n_base
        self.n_novel = n_novel

    def parameters(self) -> dict:
        params = {
            name: p
            for name, p in self.backbone.parameters().items()
            if not (name.startswith("novel") or name.startswith("over") or name.startswith("base"))
        }
        params[self.head_w.name] = self.head_w
        params[self.head_b.name] = self.head_b
        return params

    def extract_features(self, coords, neighbours=None):
        return self.backbone.extract_features(coords, neighbours)

    def logits(self, z: ad.Tensor) -> ad.Tensor:
        return ad.add(ad.matmul(self.head_w, z), self.head_b)

    def predict_slots(self, coords: np.ndarray, head: int | None = None,
                      neighbours: np.ndarray | None = None) -> np.ndarray:
        z = self.extract_features(coords, neighbours)
        return self.logits(z).data.argmax(axis=0)

    def state(self) -> dict:
        return {name: p.data for name, p in self.parameters().items()}

    def load_state(self, state: dict, strict: bool = True):
        for name, p in self.parameters().items():
            if name in state:
                p.data[...] = np.asarray(state[name], dtype=np.float64).reshape(p.data.shape)
            elif strict:
                raise KeyError(f"checkpoint missing parameter {name}")

    def save(self, path):
        ad.save_checkpoint(path, self.state())

    def load(self, path, strict: bool = True):
        self.load_state(ad.load_checkpoint(path), strict=strict)
