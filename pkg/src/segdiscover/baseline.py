"""Offline-clustering baseline: pretrain, cluster, propagate, fine-tune.

The pipeline pretrains the extractor and base head on base points only,
subsamples per-scene novel features, clusters the pooled features with
seeded k-means, spreads each pseudo-label to its nearest unselected
neighbour in coordinate space, and fine-tunes a joint head on base
ground truth plus the hard pseudo-labels. Novel ground truth is masked
at the same boundary the online trainer uses.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .augment import AugmentConfig, make_views
from .data import UNLABELLED, SplitSpec, mask_novel
from .losses import SGD, TrainConfig, compute_loss_weights, lr_at, weighted_ce
from .model import CombinedHeadModel, ModelConfig, SegmentationModel, knn_indices
from .train import _one_hot, sum_tensors


def model_knn(model) -> int:
    cfg = model.cfg if hasattr(model, "cfg") else model.backbone.cfg
    return cfg.knn


@dataclass(frozen=True)
class SubsampleSpec:
    """Per-scene novel-point subsampling: a ratio with a hard cap."""

    ratio: float = 0.3
    cap: int = 1000

    def __post_init__(self):
        if not (0.0 < self.ratio <= 1.0):
            raise ValueError("ratio must be in (0, 1]")
        if self.cap < 1:
            raise ValueError("cap must be at least 1")


@dataclass(frozen=True)
class BaselineConfig:
    pretrain_epochs: int = 20
    finetune_epochs: int = 10
    subsample: SubsampleSpec = field(default_factory=SubsampleSpec)
    overcluster: bool = False  # entropy-ranked agglomeration stage
    overcluster_factor: int = 3


@dataclass
class KMeansModel:
    centroids: np.ndarray  # (k, D)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 1:
            raise ValueError("centroids must be a non-empty (k, D) matrix")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("centroids must be finite")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def assign(self, features: np.ndarray) -> np.ndarray:
        d2 = ((features[:, None, :] - self.centroids[None, :, :]) ** 2).sum(axis=2)
        return d2.argmin(axis=1)


def _kmeans_pp_init(features, k, rng):
    n = features.shape[0]
    centers = [features[rng.integers(n)]]
    d2 = ((features - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centers.append(features[rng.integers(n)])
            continue
        probs = d2 / total
        idx = rng.choice(n, p=probs)
        centers.append(features[idx])
        d2 = np.minimum(d2, ((features - centers[-1]) ** 2).sum(axis=1))
    return np.stack(centers)


def _lloyd(features, centroids, max_iter):
    assignments = None
    for _ in range(max_iter):
        d2 = ((features[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = d2.argmin(axis=1)
        if assignments is not None and np.array_equal(new_assign, assignments):
            break
        assignments = new_assign
        for j in range(centroids.shape[0]):
            members = features[assignments == j]
            if members.shape[0]:
                centroids[j] = members.mean(axis=0)
    d2 = ((features[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    assignments = d2.argmin(axis=1)
    sse = float(d2[np.arange(features.shape[0]), assignments].sum())
    return centroids, assignments, sse


def kmeans(features, k, seed, n_init: int = 20, max_iter: int = 300):
    """Seeded k-means++ with Lloyd refinement, best SSE over restarts."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError("features must be (n, D)")
    if features.shape[0] < k:
        raise ValueError(f"cannot fit {k} clusters to {features.shape[0]} points")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        centroids = _kmeans_pp_init(features, k, rng)
        centroids, assignments, sse = _lloyd(features, centroids.copy(), max_iter)
        if best is None or sse < best[2]:
            best = (centroids, assignments, sse)
    centroids, assignments, _ = best
    return KMeansModel(centroids), assignments


def subsample_psi(n_points: int, spec: SubsampleSpec, rng: np.random.Generator) -> np.ndarray:
    """Indices of min(ceil(ratio * n), cap) points, without replacement."""
    if n_points == 0:
        return np.array([], dtype=np.intp)
    count = min(int(np.ceil(spec.ratio * n_points)), spec.cap, n_points)
    return np.sort(rng.choice(n_points, size=count, replace=False))


def propagate_nn(coords: np.ndarray, selected: np.ndarray, labels: np.ndarray):
    """Copy each selected point's label to its nearest unselected point.

    Ties break to the lower point index; if two selected points share a
    nearest neighbour, the first (lowest selected index) writes and later
    ones are ignored. Returns (indices, labels) including the originals.
    """
    selected = np.asarray(selected, dtype=np.intp)
    labels = np.asarray(labels)
    if selected.size == 0:
        raise ValueError("propagation needs a non-empty selected subset")
    n = coords.shape[0]
    mask = np.ones(n, dtype=bool)
    mask[selected] = False
    others = np.flatnonzero(mask)
    out_idx = list(selected)
    out_lab = list(labels)
    if others.size:
        written = {}
        d2 = ((coords[selected][:, None, :] - coords[others][None, :, :]) ** 2).sum(axis=2)
        nearest = others[d2.argmin(axis=1)]  # argmin takes the lowest index on ties
        for src_pos in range(selected.size):
            tgt = int(nearest[src_pos])
            if tgt not in written:
                written[tgt] = labels[src_pos]
        for tgt in sorted(written):
            out_idx.append(tgt)
            out_lab.append(written[tgt])
    order = np.argsort(out_idx, kind="stable")
    return np.asarray(out_idx, dtype=np.intp)[order], np.asarray(out_lab)[order]


def _merge_overclusters(centroids, assignments, point_entropy, n_target):
    """Agglomerate overclustered centroids down to the target count.

    Clusters are visited lowest-entropy first and greedily absorbed into
    their nearest surviving centroid; labels follow the merges.
    """
    k = centroids.shape[0]
    sizes = np.bincount(assignments, minlength=k).astype(np.float64)
    cluster_entropy = np.zeros(k)
    for j in range(k):
        members = point_entropy[assignments == j]
        cluster_entropy[j] = members.mean() if members.size else np.inf
    alive = list(range(k))
    parent = np.arange(k)
    cents = centroids.copy()
    while len(alive) > n_target:
        order = sorted(alive, key=lambda j: (cluster_entropy[j], j))
        src = order[0]
        rest = [j for j in alive if j != src]
        d2 = ((cents[rest] - cents[src]) ** 2).sum(axis=1)
        dst = rest[int(d2.argmin())]
        w = sizes[src] + sizes[dst]
        if w > 0:
            cents[dst] = (cents[src] * sizes[src] + cents[dst] * sizes[dst]) / w
        sizes[dst] = w
        cluster_entropy[dst] = min(cluster_entropy[dst], cluster_entropy[src])
        parent[src] = dst
        alive.remove(src)
    # path-compress to the surviving representative, then densify ids
    def root(j):
        while parent[j] != j:
            j = parent[j]
        return j

    dense = {j: i for i, j in enumerate(sorted(alive))}
    merged = np.array([dense[root(j)] for j in assignments])
    return cents[sorted(alive)], merged


def _train_supervised(model, scenes, targets_per_scene, weight_vec, cfg: TrainConfig,
                      aug: AugmentConfig, rng, logits_fn, epochs):
    """Plain supervised loop shared by pretraining and fine-tuning.

    ``targets_per_scene[i]`` is (col indices, one-hot matrix) or None for
    scenes with nothing to supervise.
    """
    neighbours = [knn_indices(c.coords, model_knn(model)) for c in scenes]
    opt = SGD(model.parameters(), cfg.momentum, cfg.weight_decay)
    n_batches = (len(scenes) + cfg.batch_size - 1) // cfg.batch_size
    total_steps = epochs * n_batches
    step = 0
    for _epoch in range(epochs):
        order = rng.permutation(len(scenes))
        for b in range(n_batches):
            ids = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            terms = []
            for i in ids:
                if targets_per_scene[i] is None:
                    continue
                cols, onehot = targets_per_scene[i]
                view = make_views(scenes[i], rng, aug).view_a
                z = model.extract_features(view.coords, neighbours[i])
                scaled = ad.mul(ad.gather_cols(logits_fn(model, z), cols), 1.0 / cfg.temperature)
                terms.append(weighted_ce(ad.softmax_cols(scaled), onehot, weight_vec))
            lr = lr_at(cfg, step, total_steps)
            step += 1
            if not terms:
                continue
            loss = ad.mul(sum_tensors(terms), 1.0 / len(terms))
            opt.zero_grad()
            ad.backward(loss)
            opt.step(lr)
    return model


def pretrain_base(clouds, split: SplitSpec, model_cfg: ModelConfig, train_cfg: TrainConfig,
                  baseline_cfg: BaselineConfig, aug: AugmentConfig | None = None,
                  ignore_label: int | None = None) -> SegmentationModel:
    """Supervised training of extractor plus base head on base points only."""
    masked = mask_novel(clouds, split, ignore_id=ignore_label)
    base_order = sorted(split.base_classes)
    rng = np.random.default_rng(train_cfg.seed)
    model = SegmentationModel(model_cfg, len(base_order), split.n_novel, rng)
    weights = compute_loss_weights(masked, split)
    w_vec = np.array([weights.base_weights[c] for c in base_order])

    targets = []
    for cloud in masked:
        base_idx = np.flatnonzero(cloud.labels != UNLABELLED)
        if base_idx.size == 0:
            targets.append(None)
            continue
        onehot = _one_hot(cloud.labels[base_idx], base_order, len(base_order))
        targets.append((base_idx, onehot))

    _train_supervised(
        model, masked, targets, w_vec, train_cfg, aug or AugmentConfig(), rng,
        lambda m, z: m.base_logits(z), baseline_cfg.pretrain_epochs,
    )
    return model


def finetune(pretrained: SegmentationModel, clouds, pseudo, split: SplitSpec,
             model_cfg: ModelConfig, train_cfg: TrainConfig, baseline_cfg: BaselineConfig,
             aug: AugmentConfig | None = None, ignore_label: int | None = None) -> CombinedHeadModel:
    """Joint training on base ground truth and hard novel pseudo-labels.

    ``pseudo[scene_id]`` holds (point indices, cluster slots in
    0..n_novel-1) produced by the clustering stage.
    """
    masked = mask_novel(clouds, split, ignore_id=ignore_label)
    base_order = sorted(split.base_classes)
    n_base, n_novel = len(base_order), split.n_novel
    rng = np.random.default_rng(train_cfg.seed + 1)
    model = CombinedHeadModel(model_cfg, n_base, n_novel, rng)
    model.backbone.load_state(pretrained.state(), strict=False)
    model.head_w.data[:n_base] = pretrained.base_w.data
    model.head_b.data[:n_base] = pretrained.base_b.data

    weights = compute_loss_weights(masked, split)
    w_vec = weights.vector(base_order, n_novel)
    width = n_base + n_novel

    targets = []
    for cloud in masked:
        base_idx = np.flatnonzero(cloud.labels != UNLABELLED)
        cols = [base_idx]
        blocks = []
        if base_idx.size:
            blocks.append(_one_hot(cloud.labels[base_idx], base_order, width))
        idx, slots = pseudo.get(
            cloud.scene_id, (np.array([], dtype=np.intp), np.array([], dtype=np.int64))
        )
        if idx.size:
            onehot = np.zeros((width, idx.size))
            onehot[n_base + slots, np.arange(idx.size)] = 1.0
            cols.append(idx)
            blocks.append(onehot)
        if not blocks:
            targets.append(None)
            continue
        targets.append((np.concatenate(cols), np.concatenate(blocks, axis=1)))

    _train_supervised(
        model, masked, targets, w_vec, train_cfg, aug or AugmentConfig(), rng,
        lambda m, z: m.logits(z), baseline_cfg.finetune_epochs,
    )
    return model


def run_baseline(clouds, split: SplitSpec, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 baseline_cfg: BaselineConfig, aug: AugmentConfig | None = None,
                 ignore_label: int | None = None):
    """Full offline pipeline; returns (model, per-scene pseudo-labels)."""
    masked = mask_novel(clouds, split, ignore_id=ignore_label)
    pretrained = pretrain_base(
        clouds, split, model_cfg, train_cfg, baseline_cfg, aug, ignore_label
    )

    rng = np.random.default_rng(train_cfg.seed + 2)
    feats, owners = [], []
    novel_indices = []
    for i, cloud in enumerate(masked):
        novel_idx = np.flatnonzero(cloud.labels == UNLABELLED)
        picked = novel_idx[subsample_psi(novel_idx.size, baseline_cfg.subsample, rng)]
        novel_indices.append(novel_idx)
        if picked.size == 0:
            continue
        z = pretrained.extract_features(cloud.coords[picked]).data
        feats.append(z.T)
        owners.extend((i, int(p)) for p in picked)
    pseudo: dict = {}
    if feats:
        pool = np.concatenate(feats, axis=0)
        n_novel = split.n_novel
        if baseline_cfg.overcluster and pool.shape[0] >= baseline_cfg.overcluster_factor * n_novel:
            k = baseline_cfg.overcluster_factor * n_novel
            km, assign = kmeans(pool, k, train_cfg.seed)
            d2 = ((pool[:, None, :] - km.centroids[None, :, :]) ** 2).sum(axis=2)
            temp = max(float(d2.min(axis=1).mean()), 1e-12)
            soft = np.exp(-(d2 - d2.min(axis=1, keepdims=True)) / temp)
            soft /= soft.sum(axis=1, keepdims=True)
            point_entropy = -(soft * np.log(np.maximum(soft, 1e-12))).sum(axis=1)
            _, assign = _merge_overclusters(km.centroids, assign, point_entropy, n_novel)
        else:
            _, assign = kmeans(pool, min(n_novel, pool.shape[0]), train_cfg.seed)
        per_scene: dict = {}
        for (scene, point), slot in zip(owners, assign):
            per_scene.setdefault(scene, ([], []))
            per_scene[scene][0].append(point)
            per_scene[scene][1].append(int(slot))
        for scene, (idx, slots) in per_scene.items():
            idx = np.asarray(idx, dtype=np.intp)
            slots = np.asarray(slots, dtype=np.int64)
            novel_idx = novel_indices[scene]
            # propagate within the scene's novel points only
            local = {int(p): j for j, p in enumerate(novel_idx)}
            sel_local = np.array([local[int(p)] for p in idx], dtype=np.intp)
            coords = masked[scene].coords[novel_idx]
            ext_local, ext_lab = propagate_nn(coords, sel_local, slots)
            pseudo[masked[scene].scene_id] = (novel_idx[ext_local], ext_lab)

    model = finetune(
        pretrained, clouds, pseudo, split, model_cfg, train_cfg, baseline_cfg,
        aug, ignore_label,
    )
    return model, pseudo


def write_pseudo_labels(path, pseudo: dict):
    """Binary dump: per scene a file of little-endian u32 (index, class) pairs."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for scene_id, (idx, slots) in sorted(pseudo.items()):
        buf = bytearray()
        for i, s in zip(idx.tolist(), slots.tolist()):
            buf += struct.pack("<II", i, s)
        (root / f"{scene_id}.plabel").write_bytes(bytes(buf))


def read_pseudo_labels(path):
    out = {}
    for f in sorted(Path(path).glob("*.plabel")):
        raw = f.read_bytes()
        if len(raw) % 8 != 0:
            raise ValueError(f"{f}: truncated pseudo-label dump")
        pairs = np.frombuffer(raw, dtype="<u4").reshape(-1, 2)
        out[f.stem] = (pairs[:, 0].astype(np.intp), pairs[:, 1].astype(np.int64))
    return out
