"""Inference post-processing and dataset evaluation."""
from __future__ import annotations

import numpy as np
import torch
from torchvision.ops import nms

from .combine import Detection, InstanceRecord, combine_instances
from .data import CLASSES
from .errors import CompatibilityError
from .losses import cxcywh_to_xyxy, decode_box
from .metrics import MetricReport, aiu, detection_prf, mean_ap, ods_ois
from .numeric import softmax
from .train import images_to_tensor, model_anchors


def postprocess(out, anchors, image_size: int, min_confidence: float = 0.05,
                nms_iou: float = 0.5, max_detections: int = 20, pre_nms: int = 200):
    """Per-image detection lists and foreground probability maps from raw outputs."""
    obj = torch.sigmoid(out.obj_logits).numpy()
    cls = softmax(out.cls_logits, axis=-1).numpy()
    deltas = np.clip(out.box_deltas.numpy(), -4, 4)
    if out.seg_logits.shape[1] == 1:
        maps = torch.sigmoid(out.seg_logits[:, 0]).numpy()
    else:
        maps = 1.0 - softmax(out.seg_logits, axis=1)[:, 0].numpy()
    dets = []
    for b in range(obj.shape[0]):
        conf = obj[b] * cls[b].max(axis=1)
        keep = np.flatnonzero(conf >= min_confidence)
        keep = keep[np.argsort(-conf[keep], kind="stable")][:pre_nms]
        if len(keep) == 0:
            dets.append([])
            continue
        boxes = np.clip(cxcywh_to_xyxy(decode_box(anchors[keep], deltas[b, keep])), 0, image_size)
        valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        keep, boxes = keep[valid], boxes[valid]
        # class-agnostic: one defect region yields one detection
        kept = nms(torch.from_numpy(boxes), torch.from_numpy(conf[keep]),
                   nms_iou).numpy()[:max_detections]
        dets.append([Detection(tuple(boxes[k]), cls[b, keep[k]], float(obj[b, keep[k]]))
                     for k in kept])
    return dets, maps


@torch.no_grad()
def predict(model, records, batch_size: int = 8, **kw):
    """Return ``(detections, probability_maps)`` for every record."""
    model.eval()
    anchors = model_anchors(model.cfg)
    all_dets, all_maps = [], []
    for start in range(0, len(records), batch_size):
        batch = records[start:start + batch_size]
        out = model(images_to_tensor([r.image for r in batch]))
        dets, maps = postprocess(out, anchors, model.cfg.image_size, **kw)
        all_dets.extend(dets)
        all_maps.extend(maps)
    return all_dets, all_maps


def evaluate_predictions(records, detections, prob_maps, num_classes: int = len(CLASSES),
                         iou_threshold: float = 0.5, score_threshold: float = 0.5,
                         ap_score_threshold: float = 0.05, mask_threshold: float = 0.5,
                         class_names=CLASSES) -> MetricReport:
    """Full report for already computed detections and foreground probability maps.

    Instance masks come from :func:`combine_instances` on the binarized map.
    AP uses instances down to ``ap_score_threshold``; precision/recall/F1 use
    detections at ``score_threshold``.
    """
    gts = [r.instances for r in records]
    instances = [combine_instances(d, np.asarray(m) > mask_threshold, ap_score_threshold)
                 for d, m in zip(detections, prob_maps)]
    ap_m, map_m = mean_ap(instances, gts, iou_threshold, "mask", num_classes)
    ap_b, map_b = mean_ap(instances, gts, iou_threshold, "box", num_classes)
    gt_maps = [r.binary_mask() for r in records]
    ods, ois = ods_ois(prob_maps, gt_maps)
    det_records = [[_as_instance(d) for d in ds] for ds in detections]
    p, r, f1 = detection_prf(det_records, gts, iou_threshold, score_threshold)
    return MetricReport(
        ap_mask={class_names[c]: v for c, v in ap_m.items()},
        ap_box={class_names[c]: v for c, v in ap_b.items()},
        map_mask=map_m, map_box=map_b, aiu=aiu(prob_maps, gt_maps), ods=ods, ois=ois,
        precision=p, recall=r, f1=f1)


def _as_instance(det):
    return InstanceRecord(det.label, None, det.box, det.confidence)


def ground_truth_predictions(records):
    """Detections and maps that reproduce the annotations exactly (metric ceiling)."""
    dets, maps = [], []
    for r in records:
        d = []
        for inst in r.instances:
            probs = np.zeros(len(CLASSES))
            probs[inst.label] = 1.0
            d.append(Detection(inst.box, probs, 1.0))
        dets.append(d)
        maps.append(r.binary_mask().astype(np.float64))
    return dets, maps


def evaluate_model(model, records, **kw) -> MetricReport:
    if model.cfg.num_classes != len(CLASSES):
        raise CompatibilityError(
            f"checkpoint predicts {model.cfg.num_classes} classes, dataset has {len(CLASSES)}")
    size = model.cfg.image_size
    for r in records:
        if r.image.shape != (size, size):
            raise CompatibilityError(f"image {r.image_id} is {r.image.shape}, model expects {size}x{size}")
    dets, maps = predict(model, records)
    return evaluate_predictions(records, dets, maps, **kw)
