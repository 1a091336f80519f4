"""Linear centered kernel alignment between layer activations."""
from __future__ import annotations

import numpy as np

from .errors import DomainError, ShapeError

MAX_EXAMPLES = 256


def activation_matrix(act, max_examples: int = MAX_EXAMPLES) -> np.ndarray:
    """Flatten an ``(n, ...)`` activation batch to ``n x p`` (first ``max_examples`` rows)."""
    a = np.asarray(act, dtype=np.float64)
    a = a.reshape(a.shape[0], -1)
    return a[:max_examples]


def linear_cka(x, y) -> float:
    """``||Yc' Xc||_F^2 / (||Xc' Xc||_F ||Yc' Yc||_F)`` on column-centred inputs."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise ShapeError("linear_cka expects 2-D example x feature matrices")
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"example counts differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise DomainError("need at least two examples")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    # n x n Gram form is cheaper when features outnumber examples
    if xc.shape[1] + yc.shape[1] > 2 * xc.shape[0]:
        kx, ky = xc @ xc.T, yc @ yc.T
        cross = np.sum(kx * ky)
        nx, ny = np.linalg.norm(kx), np.linalg.norm(ky)
    else:
        cross = np.linalg.norm(yc.T @ xc) ** 2
        nx = np.linalg.norm(xc.T @ xc)
        ny = np.linalg.norm(yc.T @ yc)
    if nx == 0 or ny == 0:
        raise DomainError("zero-variance representation; similarity undefined")
    return float(cross / (nx * ny))


def cka_similarity_map(acts_a, acts_b) -> np.ndarray:
    """``L_a x L_b`` matrix of :func:`linear_cka` between layer activation matrices."""
    a = [np.asarray(m, dtype=np.float64) for m in acts_a]
    b = [np.asarray(m, dtype=np.float64) for m in acts_b]
    n = {m.shape[0] for m in a + b}
    if len(n) > 1:
        raise ShapeError(f"layers use different example counts: {sorted(n)}")
    out = np.empty((len(a), len(b)))
    same = acts_a is acts_b
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            if same and j < i:
                out[i, j] = out[j, i]
            else:
                out[i, j] = linear_cka(x, y)
    return out


def render_map(sim: np.ndarray, cell: int = 16) -> np.ndarray:
    """8-bit grayscale raster of a similarity map, brighter meaning more similar."""
    img = np.clip(np.rint(np.clip(sim, 0.0, 1.0) * 255), 0, 255).astype(np.uint8)
    return np.kron(img, np.ones((cell, cell), dtype=np.uint8))
