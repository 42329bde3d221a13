"""Evaluation protocol: per-class IoU, base/novel/all mIoU, head matching.

Novel head outputs are anonymous slots; before scoring they are aligned
to ground-truth novel classes by a maximum-IoU assignment computed once
over the full evaluation set, then frozen. Classes that never occur in
either prediction or ground truth are excluded from means rather than
scored zero (configurable).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .assignment import hungarian_max
from .data import SplitSpec


@dataclass
class ConfusionMatrix:
    """Square count matrix; rows are ground truth, columns predictions."""

    classes: list  # row/column labels, in order
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.classes)
        if self.counts is None:
            self.counts = np.zeros((n, n), dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (n, n):
            raise ValueError(f"counts must be {n}x{n}, got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise ValueError("counts must be non-negative")
        self._index = {c: i for i, c in enumerate(self.classes)}

    def add(self, preds, labels, ignore_label=None):
        preds = np.asarray(preds)
        labels = np.asarray(labels)
        if preds.shape != labels.shape:
            raise ValueError("predictions and labels must have equal length")
        for gt, pr in zip(labels.tolist(), preds.tolist()):
            if ignore_label is not None and gt == ignore_label:
                continue
            if gt not in self._index:
                raise ValueError(f"ground-truth label {gt} outside the evaluated set")
            if pr not in self._index:
                raise ValueError(f"prediction {pr} outside the evaluated set")
            self.counts[self._index[gt], self._index[pr]] += 1
        return self

    def iou(self, cls) -> float | None:
        """TP / (TP + FP + FN); None when the class never occurs."""
        i = self._index[cls]
        tp = self.counts[i, i]
        denom = self.counts[i, :].sum() + self.counts[:, i].sum() - tp
        if denom == 0:
            return None
        return float(tp) / float(denom)


def confusion(preds, labels, eval_classes, ignore_label=None) -> ConfusionMatrix:
    return ConfusionMatrix(list(eval_classes)).add(preds, labels, ignore_label=ignore_label)


def miou(cm: ConfusionMatrix, class_subset, zero_division: str = "exclude") -> float:
    """Mean IoU over a class subset.

    ``zero_division='exclude'`` drops classes whose TP+FP+FN is zero from
    the mean; ``'zero'`` scores them 0 instead.
    """
    if not class_subset:
        raise ValueError("class subset must be non-empty")
    values = []
    for cls in class_subset:
        v = cm.iou(cls)
        if v is None:
            if zero_division == "zero":
                values.append(0.0)
            elif zero_division != "exclude":
                raise ValueError(f"unknown zero_division mode {zero_division!r}")
            continue
        values.append(v)
    if not values:
        return 0.0
    return float(np.mean(values))


def match_novel(count_block: np.ndarray) -> list[int]:
    """Map novel head slots to ground-truth novel classes.

    ``count_block`` is the confusion sub-matrix of novel ground-truth rows
    by novel head columns. The returned list sends head slot j to the
    novel row index mapping[j], chosen to maximize the summed IoU; ties
    break to the lowest index pair.
    """
    block = np.asarray(count_block, dtype=np.float64)
    if block.ndim != 2 or block.shape[0] != block.shape[1]:
        raise ValueError(f"expected a square block, got {block.shape}")
    row_tot = block.sum(axis=1, keepdims=True)
    col_tot = block.sum(axis=0, keepdims=True)
    denom = row_tot + col_tot - block
    iou = np.divide(block, denom, out=np.zeros_like(block), where=denom > 0)
    row_to_col = hungarian_max(iou)
    mapping = [0] * len(row_to_col)
    for row, col in enumerate(row_to_col):
        mapping[col] = row
    return mapping


@dataclass
class EvalReport:
    per_class_iou: dict  # class id -> IoU or None
    novel_miou: float
    base_miou: float
    all_miou: float
    mapping: dict  # novel head slot -> class id
    class_names: dict | None = None

    def rows(self) -> list[tuple[str, float | None]]:
        """Per-class rows followed by the three aggregate rows."""
        out = []
        for cls in sorted(self.per_class_iou):
            name = self.class_names.get(cls, str(cls)) if self.class_names else str(cls)
            out.append((name, self.per_class_iou[cls]))
        out.append(("Novel mIoU", self.novel_miou))
        out.append(("Base mIoU", self.base_miou))
        out.append(("All mIoU", self.all_miou))
        return out

    def to_tsv(self) -> str:
        lines = []
        for name, value in self.rows():
            lines.append(f"{name}\t{'' if value is None else f'{value:.4f}'}")
        return "\n".join(lines) + "\n"

    def wide_header(self) -> str:
        """Benchmark-table layout: one column per class plus aggregates."""
        names = [
            self.class_names.get(c, str(c)) if self.class_names else str(c)
            for c in sorted(self.per_class_iou)
        ]
        return "\t".join(["model"] + names + ["Novel", "Base", "All"])

    def wide_row(self, label: str) -> str:
        cells = [label]
        for c in sorted(self.per_class_iou):
            v = self.per_class_iou[c]
            cells.append("" if v is None else f"{v:.4f}")
        cells += [f"{self.novel_miou:.4f}", f"{self.base_miou:.4f}", f"{self.all_miou:.4f}"]
        return "\t".join(cells)


def evaluate(model, clouds, split: SplitSpec, head: int | None = None,
             class_names: dict | None = None, ignore_label: int | None = None,
             zero_division: str = "exclude", neighbours=None) -> EvalReport:
    """Score a model on an evaluation set.

    The model must expose ``predict_slots(coords, head)`` returning, per
    point, an argmax over base slots (sorted base ids) followed by novel
    slots. Novel slots are matched to class ids on this same set, then
    the matrix columns are permuted accordingly before scoring.
    ``neighbours`` optionally carries precomputed k-NN indices per cloud.
    """
    base_order = sorted(split.base_classes)
    novel_order = sorted(split.novel_classes)
    n_slots = len(base_order) + len(novel_order)
    n_base = len(base_order)

    cm_slots = np.zeros((n_slots, n_slots), dtype=np.int64)
    gt_index = {c: i for i, c in enumerate(base_order)}
    gt_index.update({c: n_base + j for j, c in enumerate(novel_order)})
    for i, cloud in enumerate(clouds):
        slots = model.predict_slots(
            cloud.coords, head, neighbours=None if neighbours is None else neighbours[i]
        )
        labels = cloud.labels
        if ignore_label is not None:
            keep = labels != ignore_label
            labels, slots = labels[keep], slots[keep]
        outside = set(np.unique(labels)) - set(gt_index)
        if outside:
            raise ValueError(f"ground-truth labels {sorted(outside)} outside the evaluated set")
        rows = np.array([gt_index[int(l)] for l in labels])
        np.add.at(cm_slots, (rows, slots), 1)

    mapping_rows = match_novel(cm_slots[n_base:, n_base:])
    # permute novel prediction columns so each matched slot lands on its class
    inv_map = [0] * len(novel_order)
    for slot, row in enumerate(mapping_rows):
        inv_map[row] = slot
    perm = list(range(n_base)) + [n_base + inv_map[r] for r in range(len(novel_order))]
    counts = cm_slots[:, perm]

    classes = base_order + novel_order
    cm = ConfusionMatrix(classes, counts)
    per_class = {c: cm.iou(c) for c in classes}
    report = EvalReport(
        per_class_iou=per_class,
        novel_miou=miou(cm, novel_order, zero_division),
        base_miou=miou(cm, base_order, zero_division),
        all_miou=miou(cm, classes, zero_division),
        mapping={j: novel_order[mapping_rows[j]] for j in range(len(novel_order))},
        class_names=class_names,
    )
    return report


def constant_predictor_bound(clouds, split: SplitSpec) -> float:
    """Novel mIoU of the best constant predictor (the chance-level bound).

    Predicting one class c everywhere scores IoU_c = frequency(c) and
    zero elsewhere, so the bound is max_c freq(c) / |C_n|.
    """
    novel = sorted(split.novel_classes)
    total = 0
    counts = {c: 0 for c in novel}
    for cloud in clouds:
        total += cloud.n_points
        ids, n = np.unique(cloud.labels, return_counts=True)
        for cid, cnt in zip(ids, n):
            if int(cid) in counts:
                counts[int(cid)] += int(cnt)
    if total == 0:
        return 0.0
    return max(counts.values()) / total / len(novel)
