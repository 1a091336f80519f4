"""Spatial and channel-wise multi-head attention (SCM) block.

Feature maps are channel-first ``(B, C, H, W)`` float64 tensors. Patches are
``(B, n_p, C, P, P)`` in row-major patch order; tokens are ``(B, n_p, D)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigError, ShapeError
from .numeric import DTYPE, instance_normalize, layer_normalize, softmax


@dataclass(frozen=True)
class AttentionConfig:
    patch_size: int = 16
    heads: int = 4
    layers: int = 2
    model_dim: int = 64
    mlp_hidden_dim: int | None = None  # default 2 * model_dim
    channel_attention: bool = True  # False gives the spatial-only (SM) block
    channel_mode: str = "channel"  # "channel": C x C Gram, "spatial": hw x hw Gram
    positional_encoding: bool = True

    def __post_init__(self):
        if self.patch_size < 1:
            raise ConfigError("patch_size must be >= 1")
        if self.heads < 1:
            raise ConfigError("heads must be >= 1")
        if self.layers < 0:
            raise ConfigError("layers must be >= 0")
        if self.model_dim % self.heads:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.channel_mode not in ("channel", "spatial"):
            raise ConfigError(f"unknown channel_mode {self.channel_mode!r}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def hidden_dim(self) -> int:
        return self.mlp_hidden_dim or 2 * self.model_dim

    def sequence_length(self, height: int, width: int) -> int:
        return (height // self.patch_size) * (width // self.patch_size)


def partition_patches(f: torch.Tensor, patch_size: int) -> torch.Tensor:
    """Split ``(B, C, H, W)`` into ``(B, n_p, C, P, P)`` patches, row-major."""
    if f.dim() != 4:
        raise ShapeError(f"expected (B, C, H, W), got {tuple(f.shape)}")
    b, c, h, w = f.shape
    p = patch_size
    if h % p or w % p:
        raise ConfigError(f"feature map {h}x{w} not divisible by patch size {p}")
    x = f.reshape(b, c, h // p, p, w // p, p)
    x = x.permute(0, 2, 4, 1, 3, 5)
    return x.reshape(b, (h // p) * (w // p), c, p, p)


def merge_patches(patches: torch.Tensor, patch_size: int, height: int, width: int) -> torch.Tensor:
    """Inverse of :func:`partition_patches`."""
    if patches.dim() != 5:
        raise ShapeError(f"expected (B, n_p, C, P, P), got {tuple(patches.shape)}")
    b, n, c, p1, p2 = patches.shape
    p = patch_size
    if (p1, p2) != (p, p) or height % p or width % p or n != (height // p) * (width // p):
        raise ShapeError(
            f"{n} patches of {p1}x{p2} inconsistent with {height}x{width}, P={p}")
    x = patches.reshape(b, height // p, width // p, c, p, p)
    x = x.permute(0, 3, 1, 4, 2, 5)
    return x.reshape(b, c, height, width)


def patch_channel_attention(patches: torch.Tensor, mode: str = "channel") -> torch.Tensor:
    """Residual channel attention applied independently to every patch.

    Each patch is flattened to ``hw x C`` and multiplied by its own Gram
    matrix; the result is softmaxed over channels and added back. ``mode``
    only changes the association order (``C x C`` vs ``hw x hw`` Gram), the
    product is the same.
    """
    b, n, c, p1, p2 = patches.shape
    flat = patches.reshape(b, n, c, p1 * p2).transpose(-1, -2)  # (B, n, hw, C)
    if mode == "channel":
        gram = flat.transpose(-1, -2) @ flat  # (B, n, C, C)
        attended = flat @ gram
    elif mode == "spatial":
        gram = flat @ flat.transpose(-1, -2)  # (B, n, hw, hw)
        attended = gram @ flat
    else:
        raise ConfigError(f"unknown channel attention mode {mode!r}")
    weights = softmax(attended, axis=-1)
    weights = weights.transpose(-1, -2).reshape(b, n, c, p1, p2)
    return patches + weights


def sinusoidal_encoding(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=DTYPE)[:, None]
    i = torch.arange(dim, dtype=DTYPE)[None, :]
    angle = pos / torch.pow(10000.0, (2 * torch.div(i, 2, rounding_mode="floor")) / dim)
    pe = torch.where(i.long() % 2 == 0, torch.sin(angle), torch.cos(angle))
    return pe


def tokenize_with_position(patches: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor,
                           positional: bool = True) -> torch.Tensor:
    """Flatten patches, project to ``D`` and add the sinusoidal position table."""
    b, n = patches.shape[:2]
    flat = patches.reshape(b, n, -1)
    tokens = flat @ weight + bias
    if positional:
        tokens = tokens + sinusoidal_encoding(n, weight.shape[1])
    return tokens


def multi_head_attention(tokens: torch.Tensor, w_q: torch.Tensor, w_k: torch.Tensor,
                         w_v: torch.Tensor, return_weights: bool = False):
    """Head-averaged scaled dot-product attention.

    ``w_q``, ``w_k``, ``w_v`` have shape ``(N, D, d_h)``. Per head the logit
    matrix is instance-normalized before the row softmax; head outputs are
    averaged, not concatenated, and there is no output projection.
    Returns ``(B, n, d_h)``.
    """
    if w_q.dim() != 3:
        raise ShapeError("projection weights must be (heads, D, d_h)")
    n_heads, d_model, d_h = w_q.shape
    if tokens.shape[-1] != d_model:
        raise ShapeError(f"token dim {tokens.shape[-1]} != projection input {d_model}")
    if d_model % n_heads:
        raise ConfigError(f"model dim {d_model} not divisible by {n_heads} heads")
    t = tokens.unsqueeze(1)  # (B, 1, n, D)
    q = t @ w_q  # (B, N, n, d_h)
    k = t @ w_k
    v = t @ w_v
    logits = q @ k.transpose(-1, -2) / math.sqrt(d_h)
    weights = softmax(instance_normalize(logits, dims=(-2, -1)), axis=-1)
    heads = weights @ v
    out = heads.mean(dim=1)
    if return_weights:
        return out, weights, heads
    return out


def _param(gen: torch.Generator, *shape, std: float) -> nn.Parameter:
    return nn.Parameter(torch.randn(*shape, generator=gen, dtype=DTYPE) * std)


def _zeros(*shape) -> nn.Parameter:
    return nn.Parameter(torch.zeros(*shape, dtype=DTYPE))


def _ones(*shape) -> nn.Parameter:
    return nn.Parameter(torch.ones(*shape, dtype=DTYPE))


class SCMLayer(nn.Module):
    """One attention layer operating on a feature map with ``channels`` channels."""

    def __init__(self, channels: int, cfg: AttentionConfig, gen: torch.Generator):
        super().__init__()
        self.cfg = cfg
        p, d, dh, hid = cfg.patch_size, cfg.model_dim, cfg.head_dim, cfg.hidden_dim
        flat = p * p * channels
        self.tok_w = _param(gen, flat, d, std=1.0 / math.sqrt(flat))
        self.tok_b = _zeros(d)
        self.ln1_g, self.ln1_b = _ones(d), _zeros(d)
        self.w_q = _param(gen, cfg.heads, d, dh, std=1.0 / math.sqrt(d))
        self.w_k = _param(gen, cfg.heads, d, dh, std=1.0 / math.sqrt(d))
        self.w_v = _param(gen, cfg.heads, d, dh, std=1.0 / math.sqrt(d))
        self.ln2_g, self.ln2_b = _ones(dh), _zeros(dh)
        self.mlp_w1 = _param(gen, dh, hid, std=1.0 / math.sqrt(dh))
        self.mlp_b1 = _zeros(hid)
        self.mlp_w2 = _param(gen, hid, dh, std=1.0 / math.sqrt(hid))
        self.mlp_b2 = _zeros(dh)
        # small output projection so a fresh block starts near identity
        self.detok_w = _param(gen, dh, flat, std=0.1 / math.sqrt(dh))
        self.detok_b = _zeros(flat)

    def mlp(self, x: torch.Tensor) -> torch.Tensor:
        h = torch.relu(x @ self.mlp_w1 + self.mlp_b1)
        return h @ self.mlp_w2 + self.mlp_b2

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        _, _, h, w = f.shape
        patches = partition_patches(f, cfg.patch_size)
        if cfg.channel_attention:
            patches = patch_channel_attention(patches, cfg.channel_mode)
        tokens = tokenize_with_position(patches, self.tok_w, self.tok_b, cfg.positional_encoding)
        tokens = layer_normalize(tokens, self.ln1_g, self.ln1_b)
        ma = multi_head_attention(tokens, self.w_q, self.w_k, self.w_v)
        out = ma + self.mlp(layer_normalize(ma, self.ln2_g, self.ln2_b))
        delta = (out @ self.detok_w + self.detok_b).reshape(patches.shape)
        return merge_patches(patches + delta, cfg.patch_size, h, w)


class SCMBlock(nn.Module):
    """``cfg.layers`` stacked :class:`SCMLayer`; zero layers is the identity."""

    def __init__(self, channels: int, cfg: AttentionConfig, gen: torch.Generator):
        super().__init__()
        self.cfg = cfg
        self.layers = nn.ModuleList(SCMLayer(channels, cfg, gen) for _ in range(cfg.layers))

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            f = layer(f)
        return f


def scm_block_forward(f: torch.Tensor, cfg: AttentionConfig, block: SCMBlock) -> torch.Tensor:
    """Run ``block`` on ``f`` after checking compatibility with ``cfg``."""
    if f.dim() != 4:
        raise ShapeError(f"expected (B, C, H, W), got {tuple(f.shape)}")
    if f.shape[2] % cfg.patch_size or f.shape[3] % cfg.patch_size:
        raise ConfigError(f"feature map {tuple(f.shape[2:])} not divisible by P={cfg.patch_size}")
    return block(f)
