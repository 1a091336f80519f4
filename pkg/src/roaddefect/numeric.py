"""Float64 tensor primitives with autograd-backed gradients.

Every primitive the model uses is written here in terms of elementary torch
ops, so reverse-mode gradients come from torch's tape while the values follow
the definitions below exactly. :func:`check_gradient` is an independent
central-difference checker used to validate those gradients.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch

from .errors import NumericDomainError, ShapeError

DTYPE = torch.float64
NORM_EPS = 1e-5


def as_tensor(x, requires_grad: bool = False) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        t = x.to(DTYPE)
    else:
        t = torch.as_tensor(np.asarray(x, dtype=np.float64))
    if requires_grad and not t.requires_grad:
        t = t.detach().clone().requires_grad_(True)
    return t


def ensure_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not bool(torch.isfinite(x).all()):
        raise NumericDomainError(f"non-finite values in {what}")
    return x


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    """Max-subtracted softmax along ``axis``."""
    x = as_tensor(x)
    if not -x.dim() <= axis < max(x.dim(), 1):
        raise ShapeError(f"axis {axis} out of range for rank {x.dim()}")
    ensure_finite(x, "softmax input")
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def instance_normalize(x: torch.Tensor, dims: Sequence[int] | None = None,
                       eps: float = NORM_EPS) -> torch.Tensor:
    """Zero-mean, unit-variance normalization over ``dims`` (default: all).

    A single-element extent is returned unchanged.
    """
    x = as_tensor(x)
    if dims is None:
        dims = tuple(range(x.dim()))
    dims = tuple(dims)
    extent = 1
    for d in dims:
        extent *= x.shape[d]
    if extent <= 1:
        return x
    mean = x.mean(dim=dims, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=dims, keepdim=True)
    return centered / torch.sqrt(var + eps)


def layer_normalize(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor,
                    eps: float = NORM_EPS) -> torch.Tensor:
    """Per-token normalization over the last axis followed by an affine map."""
    x = as_tensor(x)
    d = x.shape[-1]
    if tuple(gain.shape) != (d,) or tuple(bias.shape) != (d,):
        raise ShapeError(
            f"gain/bias shapes {tuple(gain.shape)}/{tuple(bias.shape)} do not match last dim {d}")
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    return centered / torch.sqrt(var + eps) * gain + bias


def smooth_l1(x: torch.Tensor) -> torch.Tensor:
    """0.5 x^2 for |x| < 1, |x| - 0.5 otherwise (elementwise)."""
    x = as_tensor(x)
    ensure_finite(x, "smooth_l1 input")
    a = torch.abs(x)
    return torch.where(a < 1.0, 0.5 * x * x, a - 0.5)


def check_gradient(f: Callable[[torch.Tensor], torch.Tensor], x, step: float = 1e-6,
                   coords: Sequence[int] | None = None) -> float:
    """Max relative error between the autograd gradient and central differences.

    The error per coordinate is ``|analytic - fd| / max(1, |fd|)``. ``coords``
    restricts the comparison to a subset of flat indices.
    """
    x0 = as_tensor(x).detach().clone()
    xa = x0.clone().requires_grad_(True)
    y = f(xa)
    if y.numel() != 1:
        raise ShapeError("check_gradient needs a scalar-valued function")
    ensure_finite(y.detach(), "function value")
    (grad,) = torch.autograd.grad(y, xa, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(x0)
    return _compare(lambda t: f(t), x0, grad, step, coords)


def check_gradients(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor],
                    step: float = 1e-6, coords_per_param: int | None = None,
                    seed: int = 0) -> float:
    """Like :func:`check_gradient` for a closure over several leaf tensors.

    The parameters are perturbed in place. With ``coords_per_param`` set, a
    seeded random subset of coordinates is checked in each tensor.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    ensure_finite(loss.detach(), "loss")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, grads):
        if g is None:
            g = torch.zeros_like(p)
        n = p.numel()
        if coords_per_param is not None and n > coords_per_param:
            idx = rng.choice(n, size=coords_per_param, replace=False)
        else:
            idx = np.arange(n)
        flat = p.data.view(-1)
        gflat = g.reshape(-1)
        for i in idx:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
            fd = (up - down) / (2 * step)
            if not np.isfinite(fd):
                raise NumericDomainError("non-finite finite-difference value")
            err = abs(gflat[i].item() - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst


def _compare(f, x0, grad, step, coords):
    flat = x0.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.numel()) if coords is None else coords
    worst = 0.0
    with torch.no_grad():
        for i in idx:
            xp = flat.clone()
            xp[i] += step
            xm = flat.clone()
            xm[i] -= step
            up = f(xp.view_as(x0)).item()
            down = f(xm.view_as(x0)).item()
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericDomainError("function returned a non-finite value")
            fd = (up - down) / (2 * step)
            worst = max(worst, abs(gflat[i].item() - fd) / max(1.0, abs(fd)))
    return worst
