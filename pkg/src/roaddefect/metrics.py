"""Segmentation, detection and instance-segmentation metrics.

All curve-based metrics treat detections with equal confidence as a single
operating point, which makes them independent of image and detection order.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ShapeError

THRESHOLDS = np.round(np.arange(1, 100) / 100.0, 2)


def box_iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = (float(v) for v in a)
    bx1, by1, bx2, by2 = (float(v) for v in b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def mask_iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 0.0


def average_precision(matched, total_gt: int, scores=None):
    """All-point interpolated AP of a ranked detection list.

    ``matched`` holds TP flags in descending-confidence order. With
    ``scores`` given, runs of equal score are evaluated as one operating
    point. Returns ``None`` when there is no ground truth.
    """
    if total_gt <= 0:
        return None
    matched = np.asarray(matched, dtype=bool)
    if matched.size == 0:
        return 0.0
    tp = np.cumsum(matched)
    n = np.arange(1, matched.size + 1)
    if scores is not None:
        scores = np.asarray(scores, dtype=np.float64)
        # last index of each run of equal scores
        ends = np.flatnonzero(np.r_[scores[1:] != scores[:-1], True])
        tp, n = tp[ends], n[ends]
    precision = tp / n
    recall = tp / total_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * envelope))


def greedy_match(pred_regions, pred_scores, gt_regions, iou_fn, iou_threshold: float):
    """Greedy one-to-one matching in descending score order.

    Each prediction takes the unmatched ground truth with the highest IoU
    (first index on ties); it is a true positive if that IoU exceeds the
    threshold. Returns TP flags aligned with the inputs.
    """
    order = sorted(range(len(pred_regions)), key=lambda i: (-pred_scores[i], i))
    taken = np.zeros(len(gt_regions), dtype=bool)
    flags = np.zeros(len(pred_regions), dtype=bool)
    for i in order:
        best, best_j = -1.0, -1
        for j, g in enumerate(gt_regions):
            if taken[j]:
                continue
            v = iou_fn(pred_regions[i], g)
            if v > best:
                best, best_j = v, j
        if best_j >= 0 and best > iou_threshold:
            taken[best_j] = True
            flags[i] = True
    return flags


def _region(inst, mode):
    return inst.box if mode == "box" else inst.mask


def mean_ap(predictions, annotations, iou_threshold: float = 0.5, mode: str = "box",
            num_classes: int = 6):
    """Per-class AP and their mean over classes present in the ground truth.

    ``predictions`` and ``annotations`` are per-image lists of
    :class:`~roaddefect.combine.InstanceRecord`.
    """
    if mode not in ("box", "mask"):
        raise ValueError(f"mode must be 'box' or 'mask', got {mode!r}")
    if len(predictions) != len(annotations):
        raise ShapeError("predictions and annotations cover different image counts")
    iou_fn = box_iou if mode == "box" else mask_iou
    per_class = {}
    for c in range(num_classes):
        scores, flags, n_gt = [], [], 0
        for preds, gts in zip(predictions, annotations):
            p = [x for x in preds if x.label == c]
            g = [x for x in gts if x.label == c]
            n_gt += len(g)
            s = [x.confidence for x in p]
            f = greedy_match([_region(x, mode) for x in p], s, [_region(x, mode) for x in g],
                             iou_fn, iou_threshold)
            scores.extend(s)
            flags.extend(f)
        scores = np.asarray(scores, dtype=np.float64)
        flags = np.asarray(flags, dtype=bool)
        order = np.argsort(-scores, kind="stable")
        per_class[c] = average_precision(flags[order], n_gt, scores[order])
    present = [v for v in per_class.values() if v is not None]
    return per_class, (float(np.mean(present)) if present else 0.0)


def _stack(maps, gts):
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    gts = [np.asarray(g, dtype=bool) for g in gts]
    if len(maps) != len(gts):
        raise ShapeError("probability maps and ground truths differ in count")
    for m, g in zip(maps, gts):
        if m.shape != g.shape:
            raise ShapeError(f"map shape {m.shape} != ground-truth shape {g.shape}")
    return maps, gts


def pixel_counts(maps, gts, thresholds=THRESHOLDS) -> np.ndarray:
    """``(n_images, n_thresholds, 3)`` array of TP, FP, FN for ``map > t``."""
    maps, gts = _stack(maps, gts)
    out = np.zeros((len(maps), len(thresholds), 3), dtype=np.int64)
    for i, (m, g) in enumerate(zip(maps, gts)):
        for k, t in enumerate(thresholds):
            pred = m > t
            out[i, k, 0] = np.count_nonzero(pred & g)
            out[i, k, 1] = np.count_nonzero(pred & ~g)
            out[i, k, 2] = np.count_nonzero(~pred & g)
    return out


def _f1(tp, fp, fn):
    tp, fp, fn = (np.asarray(v, dtype=np.float64) for v in (tp, fp, fn))
    denom = 2 * tp + fp + fn
    return np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1.0), 0.0)


def aiu(maps, gts, thresholds=THRESHOLDS) -> float:
    """Mean over thresholds of the per-image-averaged IoU of ``map > t``."""
    counts = pixel_counts(maps, gts, thresholds)
    if counts.shape[0] == 0:
        return 0.0
    tp, fp, fn = counts[..., 0], counts[..., 1], counts[..., 2]
    union = tp + fp + fn
    iou = np.where(union > 0, tp / np.where(union > 0, union, 1), 0.0)
    return float(iou.mean(axis=0).mean())


def ods_ois(maps, gts, thresholds=THRESHOLDS):
    """(ODS, OIS): best F1 at one dataset-wide threshold, and mean of per-image best F1."""
    counts = pixel_counts(maps, gts, thresholds)
    if counts.shape[0] == 0:
        return 0.0, 0.0
    agg = counts.sum(axis=0)
    ods = float(_f1(agg[:, 0], agg[:, 1], agg[:, 2]).max())
    per_image = _f1(counts[..., 0], counts[..., 1], counts[..., 2])
    ois = float(per_image.max(axis=1).mean())
    return ods, ois


def detection_prf(predictions, annotations, iou_threshold: float = 0.5,
                  confidence_threshold: float = 0.5):
    """Class-aware precision, recall and F1 over a dataset (box matching)."""
    tp = n_pred = n_gt = 0
    for preds, gts in zip(predictions, annotations):
        preds = [p for p in preds if p.confidence >= confidence_threshold]
        n_pred += len(preds)
        n_gt += len(gts)
        for c in {x.label for x in preds} | {x.label for x in gts}:
            p = [x for x in preds if x.label == c]
            g = [x for x in gts if x.label == c]
            tp += int(greedy_match([x.box for x in p], [x.confidence for x in p],
                                   [x.box for x in g], box_iou, iou_threshold).sum())
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gt if n_gt else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


@dataclass
class MetricReport:
    ap_mask: dict = field(default_factory=dict)  # class name -> AP or None (absent)
    ap_box: dict = field(default_factory=dict)
    map_mask: float = 0.0
    map_box: float = 0.0
    aiu: float = 0.0
    ods: float = 0.0
    ois: float = 0.0
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        """``key = value`` lines; absent classes are written as ``NA``."""
        lines = []
        for key in ("map_mask", "map_box", "aiu", "ods", "ois", "precision", "recall", "f1"):
            lines.append(f"{key} = {getattr(self, key):.6f}")
        for prefix, table in (("ap_mask", self.ap_mask), ("ap_box", self.ap_box)):
            for name, v in table.items():
                lines.append(f"{prefix}.{name} = {'NA' if v is None else f'{v:.6f}'}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**d)
