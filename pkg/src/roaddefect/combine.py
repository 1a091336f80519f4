"""Turn class-labelled detections plus a binary defect mask into instances."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError


@dataclass
class Detection:
    box: tuple  # xyxy
    class_probs: np.ndarray
    objectness: float = 1.0

    def __post_init__(self):
        self.box = tuple(float(v) for v in self.box)
        self.class_probs = np.asarray(self.class_probs, dtype=np.float64)

    @property
    def label(self) -> int:
        return int(np.argmax(self.class_probs))

    @property
    def confidence(self) -> float:
        """Objectness times the top class probability."""
        return float(self.objectness * self.class_probs.max())

    @property
    def area(self) -> float:
        x1, y1, x2, y2 = self.box
        return max(0.0, x2 - x1) * max(0.0, y2 - y1)


@dataclass
class InstanceRecord:
    label: int
    mask: np.ndarray  # (H, W) bool
    box: tuple  # xyxy
    confidence: float = 1.0
    extra: dict = field(default_factory=dict, repr=False)


def box_pixel_mask(box, height: int, width: int) -> np.ndarray:
    """Pixels whose centre lies inside the half-open xyxy box."""
    x1, y1, x2, y2 = box
    cols = np.arange(width) + 0.5
    rows = np.arange(height) + 0.5
    inside_c = (cols >= x1) & (cols < x2)
    inside_r = (rows >= y1) & (rows < y2)
    return inside_r[:, None] & inside_c[None, :]


def allocation_order(detections) -> list:
    """Indices sorted by confidence, then box area (both descending), then input index."""
    return sorted(range(len(detections)),
                  key=lambda i: (-detections[i].confidence, -detections[i].area, i))


def combine_instances(detections, binary_mask, score_threshold: float = 0.5) -> list:
    """Split the binary mask among detections, highest confidence first.

    Each detection claims the unclaimed mask pixels inside its box and takes
    the argmax of its class probabilities as label. Detections below
    ``score_threshold`` and instances that end up empty are dropped.
    """
    mask = np.asarray(binary_mask).astype(bool)
    if mask.ndim != 2:
        raise ShapeError(f"binary mask must be 2-D, got shape {mask.shape}")
    h, w = mask.shape
    kept = [d for d in detections if d.confidence >= score_threshold]
    claimed = np.zeros_like(mask)
    out = []
    for i in allocation_order(kept):
        det = kept[i]
        region = box_pixel_mask(det.box, h, w) & mask & ~claimed
        if not region.any():
            continue
        claimed |= region
        out.append(InstanceRecord(det.label, region, det.box, det.confidence))
    return out
