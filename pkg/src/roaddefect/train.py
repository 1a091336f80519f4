"""Configuration, learning-rate schedule and the SGD training loop.

A training config is a JSON object with these sections (all optional)::

    {
      "seed": 0,
      "train":   {"epochs": 200, "batch_size": 4, "lr": 0.01, "decay": 0.99,
                  "decay_every": 20, "momentum": 0.0, "objective": "joint",
                  "grad_clip": null},
      "network": {... NetworkConfig fields ...},
      "loss":    {... LossConfig fields ...},
      "data":    {"path": null, "train_count": 400, "eval_count": 100,
                  "scene": {... SceneSpec fields ...}}
    }

``objective`` selects which losses drive training: ``joint`` (detection +
segmentation), ``det`` or ``seg``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .data import SceneSpec, generate_dataset, read_dataset, write_dataset
from .errors import ConfigError
from .losses import (LossConfig, crop_roi, cxcywh_to_xyxy, decode_box, detection_loss,
                     generate_anchors, make_mask_target, match_anchors, pairwise_iou,
                     sample_anchors, segmentation_loss)
from .network import Model, NetworkConfig, build_network
from .numeric import DTYPE, ensure_finite, softmax

log = logging.getLogger(__name__)

OBJECTIVES = ("joint", "det", "seg")
PIXEL_MEAN, PIXEL_STD = 0.5, 0.25


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 200
    batch_size: int = 4
    lr: float = 0.01
    decay: float = 0.99
    decay_every: int = 20
    momentum: float = 0.0
    objective: str = "joint"
    grad_clip: float | None = None
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)
    dataset: str | None = None
    train_count: int = 400
    eval_count: int = 100

    def __post_init__(self):
        for name in ("epochs", "batch_size", "decay_every", "train_count"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name}: must be positive, got {getattr(self, name)}")
        if self.lr <= 0:
            raise ConfigError(f"train.lr: must be positive, got {self.lr}")
        if not 0 < self.decay <= 1:
            raise ConfigError(f"train.decay: must lie in (0, 1], got {self.decay}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"train.momentum: must lie in [0, 1), got {self.momentum}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"train.objective: must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.eval_count < 0:
            raise ConfigError("data.eval_count: must be >= 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("train.grad_clip: must be positive or null")
        if self.scene.image_size != self.network.image_size:
            raise ConfigError(f"data.scene.image_size ({self.scene.image_size}) != "
                              f"network.image_size ({self.network.image_size})")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "train": {k: getattr(self, k) for k in ("epochs", "batch_size", "lr", "decay",
                                                    "decay_every", "momentum", "objective",
                                                    "grad_clip")},
            "network": self.network.to_dict(),
            "loss": asdict(self.loss),
            "data": {"path": self.dataset, "train_count": self.train_count,
                     "eval_count": self.eval_count, "scene": self.scene.to_dict()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {"seed", "train", "network", "loss", "data"}
        if set(d) - known:
            raise ConfigError(f"unknown config section(s): {sorted(set(d) - known)}")
        kw = {}
        if "seed" in d:
            kw["seed"] = int(d["seed"])
        train = dict(d.get("train") or {})
        allowed = {"epochs", "batch_size", "lr", "decay", "decay_every", "momentum",
                   "objective", "grad_clip"}
        bad = set(train) - allowed
        if bad:
            raise ConfigError(f"train: unknown field(s) {sorted(bad)}")
        kw.update(train)
        net = NetworkConfig.from_dict(d.get("network") or {})
        loss_d = d.get("loss") or {}
        bad = set(loss_d) - {f.name for f in fields(LossConfig)}
        if bad:
            raise ConfigError(f"loss: unknown field(s) {sorted(bad)}")
        kw["loss"] = LossConfig(**loss_d)
        data = dict(d.get("data") or {})
        bad = set(data) - {"path", "train_count", "eval_count", "scene"}
        if bad:
            raise ConfigError(f"data: unknown field(s) {sorted(bad)}")
        scene = dict(data.get("scene") or {})
        scene.setdefault("image_size", net.image_size)
        scene.setdefault("stride", net.stride)
        scene.setdefault("seed", kw.get("seed", 0))
        kw["scene"] = SceneSpec.from_dict(scene)
        kw["network"] = net
        kw["dataset"] = data.get("path")
        for k in ("train_count", "eval_count"):
            if k in data:
                kw[k] = int(data[k])
        try:
            return cls(**kw)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def replace(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


def load_config(path) -> TrainConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno}: {e.msg}") from None
    return TrainConfig.from_dict(raw)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Step decay: ``lr * decay ** (epoch // decay_every)``."""
    if not 0 <= epoch < cfg.epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.lr * cfg.decay ** (epoch // cfg.decay_every)


def configure_determinism():
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


def images_to_tensor(images) -> torch.Tensor:
    arr = np.stack([np.asarray(im, dtype=np.float64) for im in images])[:, None]
    return (torch.from_numpy(arr) / 255.0 - PIXEL_MEAN) / PIXEL_STD


def model_anchors(cfg: NetworkConfig) -> np.ndarray:
    return generate_anchors(cfg.stride, cfg.anchor_scales, cfg.anchor_ratios, cfg.image_size)


def load_or_generate(cfg: TrainConfig):
    """Return ``(train_records, eval_records)``."""
    if cfg.dataset:
        path = Path(cfg.dataset)
        if (path / "dataset.json").exists():
            records = read_dataset(path)
            return records[:cfg.train_count], records[cfg.train_count:cfg.train_count + cfg.eval_count]
        records = generate_dataset(cfg.scene, cfg.train_count + cfg.eval_count)
        write_dataset(records, path, cfg.scene)
        return records[:cfg.train_count], records[cfg.train_count:]
    train = generate_dataset(cfg.scene, cfg.train_count)
    held = generate_dataset(cfg.scene, cfg.eval_count, start=cfg.train_count)
    return train, held


class Trainer:
    """Single-writer SGD loop over an in-memory record list."""

    def __init__(self, cfg: TrainConfig, model: Model | None = None):
        self.cfg = cfg
        self.model = model if model is not None else build_network(cfg.network, cfg.seed)
        self.anchors = model_anchors(cfg.network)
        self.anchors_xyxy = cxcywh_to_xyxy(self.anchors)
        params = self._trainable()
        self.opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum)
        self._targets = {}

    def _trainable(self):
        groups = self.model.parameter_groups()
        if self.cfg.objective == "det":
            return groups["encoder"] + groups["det_head"]
        if self.cfg.objective == "seg":
            return groups["encoder"] + groups["decoder"] + groups["seg_head"]
        return [p for g in groups.values() for p in g]

    def targets_for(self, rec):
        key = id(rec)
        if key not in self._targets:
            boxes = [inst.box for inst in rec.instances]
            labels = [inst.label for inst in rec.instances]
            self._targets[key] = match_anchors(self.anchors, boxes, labels,
                                               self.cfg.loss.iou_threshold)
        return self._targets[key]

    def batch_losses(self, records, rng: np.random.Generator):
        """Detection and segmentation losses for one mini-batch."""
        cfg = self.cfg
        out = self.model(images_to_tensor([r.image for r in records]))
        obj = torch.sigmoid(out.obj_logits)
        cls = softmax(out.cls_logits, axis=-1)
        seg_mode = cfg.network.seg_mode
        if seg_mode == "binary":
            seg_probs = torch.sigmoid(out.seg_logits[:, 0])
        else:
            seg_probs = softmax(out.seg_logits, axis=1)
        det_parts = ([], [], [], [], [], [])
        seg_total = torch.zeros((), dtype=DTYPE)
        deltas_np = out.box_deltas.detach().numpy()
        for b, rec in enumerate(records):
            tg = self.targets_for(rec)
            idx = sample_anchors(tg, cfg.loss.anchors_per_image, cfg.loss.positive_fraction, rng)
            t_idx = torch.as_tensor(idx)
            det_parts[0].append(obj[b].index_select(0, t_idx))
            det_parts[1].append(cls[b].index_select(0, t_idx))
            det_parts[2].append(out.box_deltas[b].index_select(0, t_idx))
            det_parts[3].append(tg.positive[idx])
            det_parts[4].append(tg.labels[idx])
            det_parts[5].append(tg.deltas[idx])
            preds, targets = self._roi_pairs(rec, tg, idx, deltas_np[b], seg_probs[b], rng)
            if preds:
                seg_total = seg_total + segmentation_loss(preds, targets, seg_mode)
        det = detection_loss(torch.cat(det_parts[0]), torch.cat(det_parts[1]),
                             torch.cat(det_parts[2]), np.concatenate(det_parts[3]),
                             np.concatenate(det_parts[4]), np.concatenate(det_parts[5]),
                             cfg.loss.balance)
        return det, seg_total / len(records)

    def _roi_pairs(self, rec, tg, idx, deltas, seg_probs, rng):
        """Positive RoIs: decoded boxes of positive sampled anchors still over the IoU threshold."""
        cfg = self.cfg
        n = cfg.network.image_size
        pos = idx[tg.positive[idx]]
        if len(pos) == 0:
            return [], []
        if len(pos) > cfg.loss.max_rois_per_image:
            pos = np.sort(rng.choice(pos, cfg.loss.max_rois_per_image, replace=False))
        boxes = cxcywh_to_xyxy(decode_box(self.anchors[pos], np.clip(deltas[pos], -4, 4)))
        boxes = np.clip(boxes, 0, n)
        preds, targets = [], []
        for k, a in enumerate(pos):
            box = boxes[k]
            if box[2] - box[0] < 1 or box[3] - box[1] < 1:
                continue
            inst = rec.instances[tg.gt_index[a]]
            if pairwise_iou(box, inst.box)[0, 0] <= cfg.loss.iou_threshold:
                continue
            target = make_mask_target(box, inst.mask)
            if cfg.network.seg_mode == "multiclass":
                target = target.astype(np.int64) * (inst.label + 1)
            preds.append(crop_roi(seg_probs, box))
            targets.append(target)
        return preds, targets

    def step(self, records, lr: float, rng: np.random.Generator) -> dict:
        for g in self.opt.param_groups:
            g["lr"] = lr
        self.model.train()
        self.opt.zero_grad(set_to_none=True)
        det, seg = self.batch_losses(records, rng)
        if self.cfg.objective == "det":
            total = det
        elif self.cfg.objective == "seg":
            total = seg
        else:
            total = det + seg
        ensure_finite(total.detach(), "training loss")
        total.backward()
        if self.cfg.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip)
        self.opt.step()
        return {"loss": total.item(), "det_loss": det.item(), "seg_loss": seg.item()}

    def fit(self, records, out_dir=None, callback=None) -> list:
        """Train for ``cfg.epochs``; returns per-epoch mean losses.

        With ``out_dir`` set, ``final.ckpt``, ``best.ckpt`` (lowest epoch loss)
        and ``train_log.jsonl`` are written there.
        """
        cfg = self.cfg
        history = []
        best = np.inf
        log_file = None
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            log_file = open(out_dir / "train_log.jsonl", "w")
        try:
            for epoch in range(cfg.epochs):
                rng = np.random.default_rng([cfg.seed, epoch])
                order = rng.permutation(len(records))
                lr = lr_at_epoch(cfg, epoch)
                sums = {"loss": 0.0, "det_loss": 0.0, "seg_loss": 0.0}
                batches = 0
                for start in range(0, len(order), cfg.batch_size):
                    batch = [records[i] for i in order[start:start + cfg.batch_size]]
                    stats = self.step(batch, lr, rng)
                    for k in sums:
                        sums[k] += stats[k]
                    batches += 1
                entry = {"event": "epoch", "epoch": epoch, "lr": lr}
                entry.update({k: v / batches for k, v in sums.items()})
                history.append(entry)
                log.info(json.dumps(entry))
                if log_file is not None:
                    log_file.write(json.dumps(entry, sort_keys=True) + "\n")
                    log_file.flush()
                    if entry["loss"] < best:
                        best = entry["loss"]
                        self.save(out_dir / "best.ckpt", epoch)
                if callback is not None:
                    callback(self, entry)
            if out_dir is not None:
                self.save(out_dir / "final.ckpt", cfg.epochs - 1)
        finally:
            if log_file is not None:
                log_file.close()
        return history

    def save(self, path, epoch: int):
        return checkpoint.save_model(path, self.model, {"epoch": epoch, "config": self.cfg.to_dict()})


def run_train(cfg: TrainConfig, out_dir) -> dict:
    """Train from a config; returns ``{"history", "final", "best"}`` paths and losses."""
    configure_determinism()
    out_dir = Path(out_dir)
    train_records, _ = load_or_generate(cfg)
    trainer = Trainer(cfg)
    (out_dir).mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    history = trainer.fit(train_records, out_dir)
    return {"history": history, "final": out_dir / "final.ckpt", "best": out_dir / "best.ckpt",
            "model": trainer.model}
