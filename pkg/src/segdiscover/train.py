"""Online discovery training: the epoch loop over the full pipeline.

Per batch and view: extract features, score novel points against each
head's prototypes (queue columns appended), solve the transport problem
at the current epoch's smoothness, filter the resulting pseudo-labels,
refresh the queue, and take an SGD step on the swapped objective over
base ground truth plus novel pseudo-labels. Novel ground truth is hidden
before the loop ever sees a point and the batch assembly asserts that.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .augment import AugmentConfig, make_views
from .data import UNLABELLED, SplitSpec, mask_novel
from .evaluate import evaluate
from .losses import SGD, TrainConfig, compute_loss_weights, lr_at, weighted_ce
from .model import ModelConfig, SegmentationModel, knn_indices
from .queueing import FeatureQueue, QueueConfig, select_phi
from .sinkhorn import EpsilonSchedule, epsilon_at, pseudo_labels_from, sinkhorn_assign

METRICS_HEADER = "epoch\tloss\tlr\teps\tnovel_mIoU\tbase_mIoU\tall_mIoU"


@dataclass(frozen=True)
class SinkhornConfig:
    iters: int = 3
    eps_start: float = 0.3
    eps_end: float = 0.05

    def schedule(self, epochs: int) -> EpsilonSchedule:
        return EpsilonSchedule(self.eps_start, self.eps_end, epochs)


@dataclass(frozen=True)
class DiscoveryConfig:
    """Component toggles mirroring the ablation ladder."""

    use_queue: bool = True
    phi_queue: bool = True  # filter queue inserts and class-balance buckets
    tau_train: bool = True  # filter the pseudo-labels used for training
    overcluster: bool = True
    percentile: float = 0.5


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    queue: QueueConfig = field(default_factory=QueueConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    discovery: DiscoveryConfig = field(default_factory=DiscoveryConfig)


@dataclass
class TrainResult:
    model: SegmentationModel
    metrics: list  # one dict per epoch
    selected_head: int
    head_losses: np.ndarray  # mean per-head novel loss, final epoch

    def metrics_tsv(self) -> str:
        lines = [METRICS_HEADER]
        for row in self.metrics:
            lines.append(
                "\t".join(
                    [
                        str(row["epoch"]),
                        f"{row['loss']:.6f}",
                        f"{row['lr']:.8f}",
                        f"{row['eps']:.6f}",
                        f"{row['novel_mIoU']:.4f}",
                        f"{row['base_mIoU']:.4f}",
                        f"{row['all_mIoU']:.4f}",
                    ]
                )
            )
        return "\n".join(lines) + "\n"


class _BatchView:
    """One view of a batch: stacked features, labels, and index sets."""

    def __init__(self, model, clouds, neighbours):
        feats = [
            model.extract_features(c.coords, neigh)
            for c, neigh in zip(clouds, neighbours)
        ]
        self.z = ad.concat_cols(feats) if len(feats) > 1 else feats[0]
        self.labels = np.concatenate([c.labels for c in clouds])
        self.base_idx = np.flatnonzero(self.labels != UNLABELLED)
        self.novel_idx = np.flatnonzero(self.labels == UNLABELLED)


def _pseudo_label(prototypes, z_novel, queue_cols, eps, iters, percentile, filter_on):
    """Transport-based soft labels for one head; returns (kept, dists)."""
    scores = prototypes.T @ z_novel
    if queue_cols.size:
        scores = np.concatenate([scores, prototypes.T @ queue_cols], axis=1)
    q = sinkhorn_assign(scores, eps, iters)
    labels = pseudo_labels_from(q, z_novel.shape[1])
    if filter_on:
        kept = select_phi(labels, percentile).kept_indices
    else:
        kept = np.arange(labels.shape[1])
    return kept, labels


def _one_hot(labels, class_order, width, offset=0):
    index = {c: i for i, c in enumerate(class_order)}
    out = np.zeros((width, labels.shape[0]))
    for col, lab in enumerate(labels.tolist()):
        out[offset + index[lab], col] = 1.0
    return out


def _ce_columns(logits, cols, targets, weights, temperature):
    pred = ad.softmax_cols(ad.mul(ad.gather_cols(logits, cols), 1.0 / temperature))
    return weighted_ce(pred, targets, weights)


def train(clouds, split: SplitSpec, cfg: ExperimentConfig, val_clouds=None,
          init_state: dict | None = None, ignore_label: int | None = None,
          log=None) -> TrainResult:
    """Run the discovery training loop and per-epoch evaluation.

    ``clouds`` keep their ground truth; novel labels are masked out here,
    at the boundary, and only the masked view is ever batched. Evaluation
    metrics use ``val_clouds`` (unmasked) or, failing that, the training
    scenes themselves.
    """
    if not clouds:
        raise ValueError("training dataset must be non-empty")
    masked = mask_novel(clouds, split, ignore_id=ignore_label)
    if not masked:
        raise ValueError("no usable scenes after masking")
    eval_set = val_clouds if val_clouds is not None else clouds
    base_order = sorted(split.base_classes)
    n_base, n_novel = len(base_order), split.n_novel
    tc = cfg.train
    dc = cfg.discovery

    # the neighbour graph survives the augmentation family, so compute it
    # once per scene instead of per view
    k = cfg.model.knn
    scene_neigh = [knn_indices(c.coords, k) for c in masked]
    eval_neigh = [knn_indices(c.coords, k) for c in eval_set]

    rng = np.random.default_rng(tc.seed)
    model = SegmentationModel(cfg.model, n_base, n_novel, rng)
    if init_state is not None:
        model.load_state(init_state, strict=False)

    weights = compute_loss_weights(masked, split)
    w_novel = weights.vector(base_order, n_novel)
    w_over = weights.vector(base_order, cfg.model.overcluster_factor * n_novel)
    queue = FeatureQueue(tuple(range(n_novel)), cfg.queue.capacity, balanced=dc.phi_queue)
    opt = SGD(model.parameters(), tc.momentum, tc.weight_decay)
    sched = cfg.sinkhorn.schedule(tc.epochs)

    n_batches = (len(masked) + tc.batch_size - 1) // tc.batch_size
    total_steps = tc.epochs * n_batches
    heads = cfg.model.heads
    step = 0
    lr = 0.0
    metrics = []
    head_losses = np.zeros(heads)

    for epoch in range(tc.epochs):
        eps = epsilon_at(sched, epoch)
        order = rng.permutation(len(masked))
        epoch_loss = 0.0
        epoch_terms = 0
        head_sums = np.zeros(heads)
        head_counts = 0

        for b in range(n_batches):
            scene_ids = order[b * tc.batch_size:(b + 1) * tc.batch_size]
            pairs = [make_views(masked[i], rng, cfg.augment) for i in scene_ids]
            neigh = [scene_neigh[i] for i in scene_ids]
            views = (
                _BatchView(model, [p.view_a for p in pairs], neigh),
                _BatchView(model, [p.view_b for p in pairs], neigh),
            )
            va, vb = views
            assert np.array_equal(va.labels, vb.labels)
            assert np.all(np.isin(va.labels[va.base_idx], base_order)), "unmasked label reached training"
            if va.base_idx.size == 0 and va.novel_idx.size == 0:
                print(f"warning: skipping batch {b} with no usable points", file=sys.stderr)
                continue

            # pseudo-labels per view and head; queue is sampled before the
            # current batch is inserted, so it only carries past iterations
            targets = [dict(), dict()]
            over_targets = [dict(), dict()]
            for vi, view in enumerate(views):
                if view.novel_idx.size == 0:
                    continue
                z_novel = view.z.data[:, view.novel_idx]
                qcols = (
                    queue.sample(cfg.queue.sample_per_class, rng)
                    if dc.use_queue
                    else np.zeros((0, 0))
                )
                for h in range(heads):
                    kept, dist = _pseudo_label(
                        model.novel_p[h].data, z_novel, qcols, eps,
                        cfg.sinkhorn.iters, dc.percentile, dc.tau_train,
                    )
                    targets[vi][h] = (kept, dist)
                    if dc.overcluster:
                        kept_o, dist_o = _pseudo_label(
                            model.over_p[h].data, z_novel, qcols, eps,
                            cfg.sinkhorn.iters, dc.percentile, dc.tau_train,
                        )
                        over_targets[vi][h] = (kept_o, dist_o)
                if dc.use_queue:
                    _, head0 = _pseudo_label(
                        model.novel_p[0].data, z_novel, qcols, eps,
                        cfg.sinkhorn.iters, dc.percentile, False,
                    )
                    cand = (
                        select_phi(head0, dc.percentile).kept_indices
                        if dc.phi_queue
                        else np.arange(head0.shape[1])
                    )
                    if cand.size:
                        queue.insert(
                            z_novel[:, cand], head0[:, cand].argmax(axis=0),
                            cfg.queue.insert_fraction, rng,
                        )

            base_onehot = [
                _one_hot(v.labels[v.base_idx], base_order, n_base) for v in views
            ]

            loss_terms = []
            batch_head_vals = np.zeros(heads)
            for h in range(heads):
                logits = [
                    ad.concat_rows([model.base_logits(v.z), model.novel_logits(v.z, h)])
                    for v in views
                ]
                term = _swapped_term(
                    views, logits, base_onehot, targets, h, n_base, n_novel,
                    w_novel, tc.temperature,
                )
                loss_terms.append(term)
                batch_head_vals[h] = float(term.data[0, 0])
                if dc.overcluster:
                    over_logits = [
                        ad.concat_rows([model.base_logits(v.z), model.over_logits(v.z, h)])
                        for v in views
                    ]
                    loss_terms.append(
                        _swapped_term(
                            views, over_logits, base_onehot, over_targets, h,
                            n_base, cfg.model.overcluster_factor * n_novel,
                            w_over, tc.temperature,
                        )
                    )

            # mean over novel heads plus mean over over-clustering heads
            total = ad.mul(sum_tensors(loss_terms), 1.0 / heads)
            lr = lr_at(tc, step, total_steps)
            opt.zero_grad()
            ad.backward(total)
            opt.step(lr)
            step += 1
            epoch_loss += float(total.data[0, 0])
            epoch_terms += 1
            head_sums += batch_head_vals
            head_counts += 1

        if head_counts:
            head_losses = head_sums / head_counts
        model.selected_head = int(np.argmin(head_losses))
        report = evaluate(
            model, eval_set, split, ignore_label=ignore_label, neighbours=eval_neigh
        )
        row = {
            "epoch": epoch,
            "loss": epoch_loss / max(1, epoch_terms),
            "lr": lr,
            "eps": eps,
            "novel_mIoU": report.novel_miou,
            "base_mIoU": report.base_miou,
            "all_mIoU": report.all_miou,
        }
        metrics.append(row)
        if log is not None:
            print(
                f"epoch {epoch}: loss {row['loss']:.4f} novel {row['novel_mIoU']:.3f} "
                f"base {row['base_mIoU']:.3f}",
                file=log,
            )

    return TrainResult(model, metrics, model.selected_head, head_losses)


def sum_tensors(terms):
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return acc


def _swapped_term(views, logits, base_onehot, targets, h, n_base, n_slots, w_vec, temperature):
    """One head's swapped loss: predictions of each view against base
    ground truth plus the other view's filtered pseudo-labels."""
    terms = []
    for vi, other in ((0, 1), (1, 0)):
        view = views[vi]
        cols = [view.base_idx]
        blocks = [np.vstack([base_onehot[vi], np.zeros((n_slots, view.base_idx.size))])]
        if targets[other].get(h) is not None:
            kept, dist = targets[other][h]
            if kept.size:
                cols.append(views[other].novel_idx[kept])
                blocks.append(np.vstack([np.zeros((n_base, kept.size)), dist[:, kept]]))
        col_idx = np.concatenate(cols)
        if col_idx.size == 0:
            continue
        target = np.concatenate(blocks, axis=1)
        terms.append(_ce_columns(logits[vi], col_idx, target, w_vec, temperature))
    if not terms:
        return ad.constant(0.0)
    return sum_tensors(terms)
