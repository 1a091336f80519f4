"""Synthetic grayscale road-defect scenes and the on-disk dataset format.

Dataset directory layout::

    dataset.json        {"format": "roaddefect-dataset", "version": 1, "count": N, "spec": {...}}
    annotations.jsonl   one JSON object per image, in image order
    images/NNNN.pgm     8-bit binary PGM rasters

Each ``annotations.jsonl`` line::

    {"id": 0, "image": "images/0000.pgm", "height": H, "width": W,
     "instances": [{"label": 2, "class": "longitudinal", "box": [x1, y1, x2, y2],
                    "mask": [run, run, ...]}]}

``mask`` is the run-length encoding described in :func:`rle_encode`.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .combine import InstanceRecord
from .errors import ConfigError, DataParseError

CLASSES = ("pothole", "manhole", "longitudinal", "transverse", "joint", "wheel")
# instance counts per class in the reference road-defect survey (1140 total)
CLASS_COUNTS = (253, 172, 182, 101, 184, 248)
DEFAULT_PROPORTIONS = tuple(c / sum(CLASS_COUNTS) for c in CLASS_COUNTS)
FORMAT_NAME = "roaddefect-dataset"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    image_size: int = 224
    min_defects: int = 1
    max_defects: int = 3
    proportions: tuple = DEFAULT_PROPORTIONS
    background: float = 128.0
    texture_std: float = 10.0
    noise_std: float = 6.0
    contrast: float = 55.0
    stride: int = 16

    def __post_init__(self):
        object.__setattr__(self, "proportions", tuple(float(p) for p in self.proportions))
        if len(self.proportions) != len(CLASSES):
            raise ConfigError(f"need {len(CLASSES)} class proportions")
        if any(p < 0 for p in self.proportions) or abs(sum(self.proportions) - 1.0) > 1e-6:
            raise ConfigError("class proportions must be non-negative and sum to 1")
        if not 0 <= self.min_defects <= self.max_defects:
            raise ConfigError("defects-per-image range must satisfy 0 <= min <= max")
        if self.image_size < 16 or self.image_size % self.stride:
            raise ConfigError(f"image_size must be divisible by the network stride {self.stride}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["proportions"] = list(self.proportions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown scene spec field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class DatasetRecord:
    image_id: int
    image: np.ndarray  # (H, W) uint8
    instances: list = field(default_factory=list)

    def binary_mask(self) -> np.ndarray:
        m = np.zeros(self.image.shape, dtype=bool)
        for inst in self.instances:
            m |= inst.mask
        return m


def tight_box(mask: np.ndarray) -> tuple:
    """Half-open xyxy box of the mask's foreground pixels."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return (float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


# -- shape rasterizers ------------------------------------------------------

def _grid(n):
    yy, xx = np.mgrid[0:n, 0:n]
    return yy + 0.5, xx + 0.5


def _polyline_mask(points, width, n):
    """Pixels within ``width / 2`` of a polyline."""
    yy, xx = _grid(n)
    d = np.full((n, n), np.inf)
    for (x0, y0), (x1, y1) in zip(points[:-1], points[1:]):
        vx, vy = x1 - x0, y1 - y0
        L2 = vx * vx + vy * vy or 1e-12
        t = np.clip(((xx - x0) * vx + (yy - y0) * vy) / L2, 0, 1)
        d = np.minimum(d, np.hypot(xx - (x0 + t * vx), yy - (y0 + t * vy)))
    return d <= width / 2


def _pothole(rng, n, s):
    r = rng.uniform(20, 42) * s
    cx, cy = rng.uniform(r + 2, n - r - 2, size=2)
    yy, xx = _grid(n)
    ang = np.arctan2(yy - cy, xx - cx)
    k = rng.uniform(0, 2 * np.pi, size=3)
    radius = r * (1 + 0.18 * np.sin(2 * ang + k[0]) + 0.1 * np.sin(3 * ang + k[1])
                  + 0.06 * np.sin(5 * ang + k[2]))
    dist = np.hypot(xx - cx, yy - cy)
    mask = dist <= radius * rng.uniform(0.7, 1.0)
    depth = np.clip(1 - dist / np.maximum(radius, 1e-6), 0, 1)
    return mask, -(0.6 + 0.6 * depth)


def _manhole(rng, n, s):
    r = rng.uniform(22, 38) * s
    cx, cy = rng.uniform(r + 2, n - r - 2, size=2)
    yy, xx = _grid(n)
    dist = np.hypot(xx - cx, yy - cy)
    mask = dist <= r
    ring = (dist > r - max(1.5, 4 * s)) & mask
    shade = np.where(ring, -1.2, 0.5 + 0.2 * np.cos((xx - cx) / max(3 * s, 1)))
    return mask, shade


def _crack(rng, n, s, vertical):
    length = rng.uniform(0.45, 0.8) * n
    amp = rng.uniform(18, 30) * s
    start = rng.uniform(amp + 4, n - amp - 4)
    along0 = rng.uniform(2, n - length - 2)
    steps = 12
    walk = np.cumsum(rng.normal(0, 0.5, steps + 1))
    walk = (walk - walk.mean())
    walk = walk / (np.abs(walk).max() or 1) * amp
    along = along0 + np.linspace(0, length, steps + 1)
    across = start + walk
    pts = list(zip(across, along)) if vertical else list(zip(along, across))
    mask = _polyline_mask(pts, max(1.5, rng.uniform(2.5, 4.0) * s), n)
    return mask, -1.4 * np.ones((n, n))


def _joint(rng, n, s):
    length = rng.uniform(0.55, 0.85) * n
    ang = rng.uniform(np.pi / 6, np.pi / 3) * rng.choice([-1, 1]) + rng.choice([0, np.pi / 2])
    dx, dy = math.cos(ang) * length / 2, math.sin(ang) * length / 2
    cx = rng.uniform(abs(dx) + 2, n - abs(dx) - 2)
    cy = rng.uniform(abs(dy) + 2, n - abs(dy) - 2)
    pts = [(cx - dx, cy - dy), (cx + dx, cy + dy)]
    mask = _polyline_mask(pts, max(2.0, 5.0 * s), n)
    return mask, -0.9 * np.ones((n, n))


def _wheel(rng, n, s):
    length = rng.uniform(0.5, 0.85) * n
    band = rng.uniform(7, 11) * s
    gap = rng.uniform(26, 40) * s
    total = 2 * band + gap
    x0 = rng.uniform(2, n - total - 2)
    y0 = rng.uniform(2, n - length - 2)
    yy, xx = _grid(n)
    in_y = (yy >= y0) & (yy < y0 + length)
    left = (xx >= x0) & (xx < x0 + band)
    right = (xx >= x0 + band + gap) & (xx < x0 + total)
    mask = in_y & (left | right)
    return mask, -0.7 * np.ones((n, n))


def _draw(rng, label, n, s):
    if label == 0:
        return _pothole(rng, n, s)
    if label == 1:
        return _manhole(rng, n, s)
    if label in (2, 3):
        return _crack(rng, n, s, vertical=label == 2)
    if label == 4:
        return _joint(rng, n, s)
    return _wheel(rng, n, s)


def _background(rng, spec):
    n = spec.image_size
    coarse = rng.normal(0, 1, size=(8, 8))
    low = ndimage.zoom(coarse, n / 8, order=3)[:n, :n]
    grain = ndimage.gaussian_filter(rng.normal(0, 1, size=(n, n)), 1.0)
    return spec.background + spec.texture_std * low + spec.noise_std * 2.0 * grain


def generate_scene(spec: SceneSpec, index: int) -> DatasetRecord:
    """Scene ``index`` of the dataset described by ``spec``.

    All randomness comes from a generator seeded with ``(spec.seed, index)``.
    Defect boxes do not overlap.
    """
    rng = np.random.default_rng([int(spec.seed), int(index)])
    n = spec.image_size
    s = n / 224.0
    img = _background(rng, spec)
    count = int(rng.integers(spec.min_defects, spec.max_defects + 1))
    labels = rng.choice(len(CLASSES), size=count, p=np.asarray(spec.proportions))
    instances = []
    for label in labels:
        for _ in range(30):
            mask, shade = _draw(rng, int(label), n, s)
            if not mask.any():
                continue
            box = tight_box(mask)
            if all(_box_gap(box, other.box) for other in instances):
                break
        else:
            continue
        img = np.where(mask, img + spec.contrast * shade, img)
        instances.append(InstanceRecord(int(label), mask, box, 1.0))
    img = img + rng.normal(0, spec.noise_std, size=img.shape)
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return DatasetRecord(int(index), image, instances)


def _box_gap(a, b, margin=2.0):
    return (a[2] + margin <= b[0] or b[2] + margin <= a[0]
            or a[3] + margin <= b[1] or b[3] + margin <= a[1])


def generate_dataset(spec: SceneSpec, count: int, start: int = 0) -> list:
    return [generate_scene(spec, i) for i in range(start, start + count)]


# -- run-length encoding ----------------------------------------------------

def rle_encode(mask) -> list:
    """Row-major run lengths alternating background/foreground, starting with background."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.r_[0, change, flat.size]
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(runs, shape) -> np.ndarray:
    runs = [int(r) for r in runs]
    total = int(np.prod(shape))
    if any(r < 0 for r in runs) or sum(runs) != total:
        raise DataParseError(f"run lengths sum to {sum(runs)}, expected {total}")
    values = np.arange(len(runs)) % 2 == 1
    return np.repeat(values, runs).reshape(shape)


# -- dataset I/O ------------------------------------------------------------

def write_dataset(records, path, spec: SceneSpec | None = None) -> Path:
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for rec in records:
        rel = f"images/{rec.image_id:04d}.pgm"
        Image.fromarray(np.ascontiguousarray(rec.image, dtype=np.uint8), mode="L").save(path / rel)
        h, w = rec.image.shape
        insts = [{"label": int(inst.label), "class": CLASSES[inst.label],
                  "box": [float(v) for v in inst.box], "mask": rle_encode(inst.mask)}
                 for inst in rec.instances]
        lines.append(json.dumps({"id": int(rec.image_id), "image": rel, "height": h,
                                 "width": w, "instances": insts}, separators=(",", ":")))
    (path / "annotations.jsonl").write_text("".join(line + "\n" for line in lines))
    manifest = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "count": len(lines),
                "spec": spec.to_dict() if spec is not None else None}
    (path / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / "dataset.json").read_text())
    except FileNotFoundError:
        raise DataParseError(f"{path}: missing dataset.json") from None
    except json.JSONDecodeError as e:
        raise DataParseError(f"dataset.json: {e.msg}", line=e.lineno) from None
    if manifest.get("format") != FORMAT_NAME or manifest.get("version") != FORMAT_VERSION:
        raise DataParseError(f"{path}: unsupported dataset format {manifest.get('format')!r} "
                             f"v{manifest.get('version')}")
    return manifest


def read_dataset(path) -> list:
    path = Path(path)
    manifest = read_manifest(path)
    records = []
    text = (path / "annotations.jsonl").read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
            h, w = int(entry["height"]), int(entry["width"])
            image = np.array(Image.open(path / entry["image"]), dtype=np.uint8)
            if image.shape != (h, w):
                raise ValueError(f"raster is {image.shape}, annotation says {(h, w)}")
            insts = []
            for obj in entry["instances"]:
                label = int(obj["label"])
                if not 0 <= label < len(CLASSES):
                    raise ValueError(f"label {label} outside the class taxonomy")
                mask = rle_decode(obj["mask"], (h, w))
                insts.append(InstanceRecord(label, mask, tuple(float(v) for v in obj["box"]), 1.0))
            records.append(DatasetRecord(int(entry["id"]), image, insts))
        except DataParseError as e:
            raise DataParseError(str(e), line=lineno) from None
        except (json.JSONDecodeError, KeyError, TypeError, ValueError, OSError) as e:
            raise DataParseError(f"annotations.jsonl: {type(e).__name__}: {e}", line=lineno) from None
    if manifest.get("count") is not None and manifest["count"] != len(records):
        raise DataParseError(f"manifest lists {manifest['count']} images, found {len(records)}")
    return records
