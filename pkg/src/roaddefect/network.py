"""Encoder/decoder network with SCM blocks and detection/segmentation heads.

Layout (4 downsampling stages)::

    stem(H) -> enc1(H/2) -> enc2(H/4) -> enc3(H/8) -> enc4(H/16)   encoder
    enc4 -> dec1(H/8) -> dec2(H/4) -> dec3(H/2) -> dec4(H)           decoder
                 + enc3       + enc2       + enc1       + stem       (concat skips)

An attention block follows every encoder stage and every decoder stage
except the last one. The detection head reads ``enc4``; the segmentation
head reads ``dec4``.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, replace
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .attention import AttentionConfig, SCMBlock
from .errors import ConfigError, ShapeError
from .numeric import DTYPE

VARIANTS = ("naive", "sm", "scm")
SEG_MODES = ("binary", "multiclass")


@dataclass(frozen=True)
class NetworkConfig:
    image_size: int = 224
    in_channels: int = 1
    stem_width: int = 8
    widths: tuple = (16, 32, 64, 128)
    variant: str = "scm"
    num_classes: int = 6
    seg_mode: str = "binary"
    heads: int = 4
    attention_layers: int = 2
    model_dim: int = 64
    mlp_hidden_dim: int | None = None
    channel_mode: str = "channel"
    positional_encoding: bool = True
    anchor_scales: tuple = (48.0, 96.0, 160.0)
    anchor_ratios: tuple = (0.25, 1.0, 4.0)
    det_hidden: int = 64

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "anchor_scales", tuple(float(s) for s in self.anchor_scales))
        object.__setattr__(self, "anchor_ratios", tuple(float(r) for r in self.anchor_ratios))
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.seg_mode not in SEG_MODES:
            raise ConfigError(f"seg_mode must be one of {SEG_MODES}, got {self.seg_mode!r}")
        if len(self.widths) < 1 or any(w < 1 for w in self.widths) or self.stem_width < 1:
            raise ConfigError(f"invalid stage widths {self.widths}")
        if self.image_size % self.stride:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by network stride {self.stride}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.variant != "naive":
            self.attention_config(0)  # validates heads / model_dim

    @property
    def stride(self) -> int:
        return 2 ** len(self.widths)

    @property
    def grid(self) -> int:
        """Side of the bottleneck map, also the patch grid side at every attention site."""
        return self.image_size // self.stride

    @property
    def anchors_per_cell(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)

    @property
    def seg_channels(self) -> int:
        return 1 if self.seg_mode == "binary" else self.num_classes + 1

    def attention_config(self, level: int) -> AttentionConfig:
        """Attention config for a map downsampled ``level`` times (patch grid stays fixed)."""
        side = self.image_size // (2 ** level)
        return AttentionConfig(
            patch_size=side // self.grid,
            heads=self.heads,
            layers=self.attention_layers,
            model_dim=self.model_dim,
            mlp_hidden_dim=self.mlp_hidden_dim,
            channel_attention=self.variant == "scm",
            channel_mode=self.channel_mode,
            positional_encoding=self.positional_encoding,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("widths", "anchor_scales", "anchor_ratios"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config field(s): {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "NetworkConfig":
        return replace(self, **kw)


def _generator(seed: int, name: str) -> torch.Generator:
    # one stream per named submodule: adding attention never shifts conv weights
    return torch.Generator().manual_seed((int(seed) * 1_000_003 + zlib.crc32(name.encode())) % 2**63)


def _conv(gen, cin, cout, k, stride=1, transpose=False):
    if transpose:
        m = nn.ConvTranspose2d(cin, cout, k, stride=stride, dtype=DTYPE)
        fan_in = cin * k * k / (stride * stride)
    else:
        m = nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, dtype=DTYPE)
        fan_in = cin * k * k
    with torch.no_grad():
        m.weight.copy_(torch.randn(m.weight.shape, generator=gen, dtype=DTYPE) * math.sqrt(2.0 / fan_in))
        m.bias.zero_()
    return m


class EncoderStage(nn.Module):
    def __init__(self, gen, cin, cout):
        super().__init__()
        self.down = _conv(gen, cin, cout, 3, stride=2)
        self.conv = _conv(gen, cout, cout, 3)

    def forward(self, x):
        return F.relu(self.conv(F.relu(self.down(x))))


class DecoderStage(nn.Module):
    """Upsample x2, concatenate the skip (doubling its width) and fuse."""

    def __init__(self, gen, cin, cskip):
        super().__init__()
        self.up = _conv(gen, cin, cskip, 2, stride=2, transpose=True)
        self.fuse = _conv(gen, 2 * cskip, cskip, 3)

    def forward(self, x, skip):
        up = F.relu(self.up(x))
        return F.relu(self.fuse(torch.cat([up, skip], dim=1)))


class DetectionHead(nn.Module):
    def __init__(self, gen, cin, hidden, anchors, num_classes):
        super().__init__()
        self.anchors = anchors
        self.num_classes = num_classes
        self.conv = _conv(gen, cin, hidden, 3)
        self.obj = _conv(gen, hidden, anchors, 1)
        self.cls = _conv(gen, hidden, anchors * num_classes, 1)
        self.box = _conv(gen, hidden, anchors * 4, 1)
        with torch.no_grad():
            for m in (self.obj, self.cls, self.box):
                m.weight.mul_(0.1)

    def forward(self, x):
        """Per-anchor outputs ordered (row, col, anchor) to match :func:`generate_anchors`."""
        b = x.shape[0]
        h = F.relu(self.conv(x))
        obj = self.obj(h).permute(0, 2, 3, 1).reshape(b, -1)
        cls = self.cls(h).permute(0, 2, 3, 1).reshape(b, -1, self.num_classes)
        box = self.box(h).permute(0, 2, 3, 1).reshape(b, -1, 4)
        return obj, cls, box


class SegmentationHead(nn.Module):
    def __init__(self, gen, cin, cout):
        super().__init__()
        self.conv = _conv(gen, cin, cin, 3)
        self.out = _conv(gen, cin, cout, 1)

    def forward(self, x):
        return self.out(F.relu(self.conv(x)))


class ModelOutput(NamedTuple):
    obj_logits: torch.Tensor  # (B, A_total)
    cls_logits: torch.Tensor  # (B, A_total, K)
    box_deltas: torch.Tensor  # (B, A_total, 4)
    seg_logits: torch.Tensor  # (B, S, H, W)
    activations: dict


class Model(nn.Module):
    """Mini instance-segmentation network; see module docstring for layout."""

    def __init__(self, cfg: NetworkConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.seed = int(seed)
        widths = cfg.widths
        attn = cfg.variant != "naive"
        self.stem = _conv(_generator(seed, "stem"), cfg.in_channels, cfg.stem_width, 3)
        self.encoder = nn.ModuleList()
        self.enc_attn = nn.ModuleDict()
        cin = cfg.stem_width
        for i, w in enumerate(widths):
            self.encoder.append(EncoderStage(_generator(seed, f"enc{i + 1}"), cin, w))
            if attn:
                self.enc_attn[str(i + 1)] = SCMBlock(
                    w, cfg.attention_config(i + 1), _generator(seed, f"enc{i + 1}.scm"))
            cin = w
        skips = [cfg.stem_width] + list(widths[:-1])
        self.decoder = nn.ModuleList()
        self.dec_attn = nn.ModuleDict()
        n = len(widths)
        for j in range(n):
            cskip = skips[n - 1 - j]
            self.decoder.append(DecoderStage(_generator(seed, f"dec{j + 1}"), cin, cskip))
            level = n - 1 - j
            if attn and level > 0:
                self.dec_attn[str(j + 1)] = SCMBlock(
                    cskip, cfg.attention_config(level), _generator(seed, f"dec{j + 1}.scm"))
            cin = cskip
        self.det_head = DetectionHead(_generator(seed, "det_head"), widths[-1], cfg.det_hidden,
                                      cfg.anchors_per_cell, cfg.num_classes)
        self.seg_head = SegmentationHead(_generator(seed, "seg_head"), cfg.stem_width,
                                         cfg.seg_channels)

    def parameter_groups(self) -> dict:
        """Parameters of the shared encoder, the decoder and each head."""
        groups = {"encoder": [], "decoder": [], "det_head": [], "seg_head": []}
        for name, p in self.named_parameters():
            root = name.split(".")[0]
            if root in ("stem", "encoder", "enc_attn"):
                groups["encoder"].append(p)
            elif root in ("decoder", "dec_attn"):
                groups["decoder"].append(p)
            else:
                groups[root].append(p)
        return groups

    def layer_names(self) -> list:
        return list(self._trace_names())

    def _trace_names(self):
        yield "stem"
        for i in range(len(self.encoder)):
            yield f"enc{i + 1}"
            if str(i + 1) in self.enc_attn:
                yield f"enc{i + 1}.scm"
        for j in range(len(self.decoder)):
            yield f"dec{j + 1}"
            if str(j + 1) in self.dec_attn:
                yield f"dec{j + 1}.scm"

    def features(self, image: torch.Tensor):
        """Return (encoder features, decoder output, activations)."""
        cfg = self.cfg
        if image.dim() == 3:
            image = image.unsqueeze(1)
        if image.dim() != 4 or tuple(image.shape[1:]) != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise ShapeError(
                f"expected images of shape (B, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}),"
                f" got {tuple(image.shape)}")
        image = image.to(DTYPE)
        acts = {}
        x = F.relu(self.stem(image))
        acts["stem"] = x
        enc = [x]
        for i, stage in enumerate(self.encoder):
            x = stage(x)
            acts[f"enc{i + 1}"] = x
            key = str(i + 1)
            if key in self.enc_attn:
                x = self.enc_attn[key](x)
                acts[f"enc{i + 1}.scm"] = x
            enc.append(x)
        skips = enc[:-1]
        for j, stage in enumerate(self.decoder):
            x = stage(x, skips[-1 - j])
            acts[f"dec{j + 1}"] = x
            key = str(j + 1)
            if key in self.dec_attn:
                x = self.dec_attn[key](x)
                acts[f"dec{j + 1}.scm"] = x
        return enc, x, acts

    def forward(self, image: torch.Tensor) -> ModelOutput:
        enc, dec, acts = self.features(image)
        obj, cls, box = self.det_head(enc[-1])
        seg = self.seg_head(dec)
        return ModelOutput(obj, cls, box, seg, acts)


def build_network(cfg: NetworkConfig, seed: int = 0) -> Model:
    return Model(cfg, seed)


def forward(model: Model, image: torch.Tensor):
    """Encoder features, decoder features and per-layer activations."""
    return model.features(image)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
