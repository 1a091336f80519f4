"""Anchors, box coding, target assignment and the multi-task objective.

Box conventions: ``xyxy`` boxes are continuous half-open pixel extents
``(x1, y1, x2, y2)``; anchors and the box coder use centre form
``(cx, cy, w, h)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, DomainError, ShapeError
from .numeric import as_tensor, smooth_l1

PROB_EPS = 1e-7
DICE_EPS = 1e-6


@dataclass(frozen=True)
class LossConfig:
    balance: float = 1.0  # lambda, weight of the regression term
    iou_threshold: float = 0.5
    anchors_per_image: int = 64  # anchor sample size per image (N_anch = B * this)
    positive_fraction: float = 0.5
    max_rois_per_image: int = 8

    def __post_init__(self):
        if self.balance < 0:
            raise ConfigError("balance (lambda) must be >= 0")
        if self.anchors_per_image < 1:
            raise ConfigError("anchors_per_image must be >= 1")
        if not 0 <= self.positive_fraction <= 1:
            raise ConfigError("positive_fraction must lie in [0, 1]")


@dataclass
class AnchorTargets:
    positive: np.ndarray  # (A,) bool, p^p
    labels: np.ndarray  # (A,) int class index, -1 for negatives
    deltas: np.ndarray  # (A, 4) t*, zeros for negatives
    gt_index: np.ndarray  # (A,) matched ground-truth index, -1 for negatives
    best_iou: np.ndarray  # (A,)

    def __len__(self):
        return len(self.positive)


def xyxy_to_cxcywh(b) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.stack([(b[..., 0] + b[..., 2]) / 2, (b[..., 1] + b[..., 3]) / 2,
                     b[..., 2] - b[..., 0], b[..., 3] - b[..., 1]], axis=-1)


def cxcywh_to_xyxy(b) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.stack([b[..., 0] - b[..., 2] / 2, b[..., 1] - b[..., 3] / 2,
                     b[..., 0] + b[..., 2] / 2, b[..., 1] + b[..., 3] / 2], axis=-1)


def generate_anchors(stride: int, scales, ratios, image_size: int) -> np.ndarray:
    """Dense ``(cx, cy, w, h)`` anchor grid.

    Order: row, column, scale, ratio. ``ratio`` is height / width and each
    anchor keeps area ``scale**2``.
    """
    if image_size % stride:
        raise ConfigError(f"stride {stride} does not divide image size {image_size}")
    cells = image_size // stride
    shapes = [(s / math.sqrt(r), s * math.sqrt(r)) for s in scales for r in ratios]
    out = np.empty((cells, cells, len(shapes), 4))
    centers = (np.arange(cells) + 0.5) * stride
    for k, (w, h) in enumerate(shapes):
        out[:, :, k, 0] = centers[None, :]
        out[:, :, k, 1] = centers[:, None]
        out[:, :, k, 2] = w
        out[:, :, k, 3] = h
    return out.reshape(-1, 4)


def encode_box(anchor, box) -> np.ndarray:
    """Regression deltas of ``box`` relative to ``anchor`` (both centre form)."""
    a = np.asarray(anchor, dtype=np.float64)
    b = np.asarray(box, dtype=np.float64)
    if np.any(a[..., 2:] <= 0) or np.any(b[..., 2:] <= 0):
        raise DomainError("box and anchor extents must be positive")
    return np.stack([(b[..., 0] - a[..., 0]) / a[..., 2], (b[..., 1] - a[..., 1]) / a[..., 3],
                     np.log(b[..., 2] / a[..., 2]), np.log(b[..., 3] / a[..., 3])], axis=-1)


def decode_box(anchor, t) -> np.ndarray:
    a = np.asarray(anchor, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if np.any(a[..., 2:] <= 0):
        raise DomainError("anchor extents must be positive")
    return np.stack([a[..., 0] + t[..., 0] * a[..., 2], a[..., 1] + t[..., 1] * a[..., 3],
                     a[..., 2] * np.exp(t[..., 2]), a[..., 3] * np.exp(t[..., 3])], axis=-1)


def pairwise_iou(a_xyxy, b_xyxy) -> np.ndarray:
    a = np.asarray(a_xyxy, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b_xyxy, dtype=np.float64).reshape(-1, 4)
    ix = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def match_anchors(anchors, gt_boxes, gt_labels, iou_threshold: float = 0.5) -> AnchorTargets:
    """An anchor is positive iff its best IoU with a ground-truth box exceeds the threshold.

    ``anchors`` are centre form, ``gt_boxes`` are xyxy. Ties on IoU go to the
    lowest ground-truth index.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    n = len(anchors)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    labels = np.full(n, -1, dtype=np.int64)
    deltas = np.zeros((n, 4))
    gt_index = np.full(n, -1, dtype=np.int64)
    if len(gt_boxes) == 0 or n == 0:
        return AnchorTargets(np.zeros(n, bool), labels, deltas, gt_index, np.zeros(n))
    iou = pairwise_iou(cxcywh_to_xyxy(anchors), gt_boxes)
    best = iou.argmax(axis=1)
    best_iou = iou[np.arange(n), best]
    positive = best_iou > iou_threshold
    gt_index[positive] = best[positive]
    labels[positive] = np.asarray(gt_labels, dtype=np.int64)[best[positive]]
    if positive.any():
        deltas[positive] = encode_box(anchors[positive], xyxy_to_cxcywh(gt_boxes[best[positive]]))
    return AnchorTargets(positive, labels, deltas, gt_index, best_iou)


def sample_anchors(targets: AnchorTargets, size: int, positive_fraction: float,
                   rng: np.random.Generator) -> np.ndarray:
    """Indices of a class-balanced anchor subset (sorted)."""
    pos = np.flatnonzero(targets.positive)
    neg = np.flatnonzero(~targets.positive)
    n_pos = min(len(pos), int(round(size * positive_fraction)))
    n_neg = min(len(neg), size - n_pos)
    chosen = np.concatenate([rng.choice(pos, n_pos, replace=False) if n_pos else pos[:0],
                             rng.choice(neg, n_neg, replace=False) if n_neg else neg[:0]])
    return np.sort(chosen)


def _clip(p):
    return torch.clamp(p, PROB_EPS, 1.0 - PROB_EPS)


def detection_loss(objectness: torch.Tensor, class_probs: torch.Tensor, deltas: torch.Tensor,
                   positive, labels, target_deltas, balance: float = 1.0) -> torch.Tensor:
    """Multi-class detection objective averaged over the sampled anchors.

    Objectness log loss on every anchor, cross-entropy against the one-hot
    class on positive anchors, and smooth-L1 box regression gated by the
    positivity label and weighted by ``balance``.
    """
    objectness = as_tensor(objectness).reshape(-1)
    n = objectness.numel()
    class_probs = as_tensor(class_probs).reshape(n, -1)
    deltas = as_tensor(deltas).reshape(n, 4)
    positive = torch.as_tensor(np.asarray(positive, dtype=bool)).reshape(-1)
    labels = torch.as_tensor(np.asarray(labels, dtype=np.int64)).reshape(-1)
    target_deltas = as_tensor(target_deltas).reshape(-1, 4)
    if not (len(positive) == len(labels) == len(target_deltas) == n):
        raise ShapeError("predictions and targets are not aligned by anchor")
    if n == 0:
        raise ShapeError("empty anchor set")
    pp = positive.to(objectness.dtype)
    p = _clip(objectness)
    l_obj = -(pp * torch.log(p) + (1 - pp) * torch.log(1 - p))
    safe_labels = torch.where(positive, labels, torch.zeros_like(labels))
    picked = _clip(class_probs.gather(1, safe_labels[:, None]).squeeze(1))
    l_cls = torch.where(positive, -torch.log(picked), torch.zeros_like(picked))
    l_reg = smooth_l1(deltas - target_deltas).sum(dim=1)
    l_reg = torch.where(positive, l_reg, torch.zeros_like(l_reg))
    return (l_obj + l_cls).sum() / n + balance * l_reg.sum() / n


def dice_loss(pred: torch.Tensor, gt) -> torch.Tensor:
    pred = as_tensor(pred)
    gt = as_tensor(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"dice_loss shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    inter = (pred * gt).sum()
    return 1.0 - (2.0 * inter + DICE_EPS) / (pred.sum() + gt.sum() + DICE_EPS)


def bce_loss(pred: torch.Tensor, gt) -> torch.Tensor:
    pred = as_tensor(pred)
    gt = as_tensor(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"bce_loss shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    p = _clip(pred)
    return -(gt * torch.log(p) + (1 - gt) * torch.log(1 - p)).mean()


def cross_entropy_map(probs: torch.Tensor, labels) -> torch.Tensor:
    """Mean pixel cross-entropy of ``(S, h, w)`` class probabilities against a label map."""
    probs = as_tensor(probs)
    labels = torch.as_tensor(np.asarray(labels, dtype=np.int64))
    if probs.shape[1:] != labels.shape:
        raise ShapeError("cross_entropy_map shape mismatch")
    picked = probs.gather(0, labels[None]).squeeze(0)
    return -torch.log(_clip(picked)).mean()


def roi_pixels(roi, height: int, width: int, out_size: int | None = None):
    """Row and column sample indices for an xyxy RoI.

    ``out_size=None`` samples the RoI at native resolution (integer-aligned
    outward); otherwise an ``out_size x out_size`` nearest-neighbour grid.
    """
    x1, y1, x2, y2 = (float(v) for v in roi)
    if not (x2 > x1 and y2 > y1):
        raise DomainError(f"degenerate RoI {roi}")
    if out_size is None:
        c0, c1 = max(0, math.floor(x1)), min(width, math.ceil(x2))
        r0, r1 = max(0, math.floor(y1)), min(height, math.ceil(y2))
        if c1 <= c0 or r1 <= r0:
            raise DomainError(f"RoI {roi} lies outside the {height}x{width} image")
        return np.arange(r0, r1), np.arange(c0, c1)
    i = (np.arange(out_size) + 0.5) / out_size
    rows = np.clip(np.floor(y1 + i * (y2 - y1)).astype(np.int64), 0, height - 1)
    cols = np.clip(np.floor(x1 + i * (x2 - x1)).astype(np.int64), 0, width - 1)
    return rows, cols


def make_mask_target(roi, gt_mask, out_size: int | None = None) -> np.ndarray:
    """Ground-truth mask restricted to ``roi`` and resampled (nearest neighbour)."""
    gt_mask = np.asarray(gt_mask)
    rows, cols = roi_pixels(roi, gt_mask.shape[0], gt_mask.shape[1], out_size)
    return gt_mask[np.ix_(rows, cols)].astype(np.float64)


def crop_roi(prob_map: torch.Tensor, roi, out_size: int | None = None) -> torch.Tensor:
    """Differentiable crop of the last two axes of ``prob_map`` with :func:`roi_pixels`."""
    h, w = prob_map.shape[-2:]
    rows, cols = roi_pixels(roi, h, w, out_size)
    r = torch.as_tensor(rows)
    c = torch.as_tensor(cols)
    return prob_map.index_select(-2, r).index_select(-1, c)


def segmentation_loss(preds, targets, mode: str = "binary") -> torch.Tensor:
    """Sum over RoIs of BCE + Dice (binary) or pixel cross-entropy (multiclass).

    Binary: ``preds`` are ``(h, w)`` foreground probabilities, ``targets``
    binary masks. Multiclass: ``preds`` are ``(K+1, h, w)`` probabilities and
    ``targets`` integer label maps with 0 as background.
    """
    if len(preds) != len(targets):
        raise ShapeError("segmentation_loss needs one target per RoI")
    total = torch.zeros((), dtype=torch.float64)
    for p, t in zip(preds, targets):
        if mode == "binary":
            total = total + bce_loss(p, t) + dice_loss(p, t)
        elif mode == "multiclass":
            total = total + cross_entropy_map(p, t)
        else:
            raise ConfigError(f"unknown segmentation mode {mode!r}")
    return total
