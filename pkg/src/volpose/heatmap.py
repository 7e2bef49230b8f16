"""Gaussian heatmaps, greedy peak picking and soft-argmax decoding.

Heatmaps are plain non-negative numpy arrays (1D or 2D), addressed in
array-index coordinates.  A :class:`Peak` position is a float vector in the
same coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AllZeroHeatmap, NonPositiveSigma

DEFAULT_SIGMA = 2.5
DEFAULT_TEMPERATURE = 0.05
DEFAULT_K = 10
DEFAULT_NMS_RADIUS = 3
DEFAULT_THRESHOLD = 0.3
# softmax weights below this fraction of the top weight are dropped, so isolated deltas decode exactly
WEIGHT_FLOOR = 1e-8
LOG_FLOOR = float(np.log(WEIGHT_FLOOR))


@dataclass(frozen=True)
class Peak:
    position: np.ndarray
    confidence: float


def render_gaussian(extent, center, sigma: float) -> np.ndarray:
    """Unnormalised Gaussian ``exp(-|p - center|^2 / (2 sigma^2))`` over a 1D or 2D grid."""
    if not sigma > 0:
        raise NonPositiveSigma(f"sigma must be positive, got {sigma}")
    extent = (int(extent),) if np.isscalar(extent) else tuple(int(e) for e in extent)
    center = np.atleast_1d(np.asarray(center, dtype=np.float64))
    if center.size != len(extent):
        raise ValueError(f"center {center.tolist()} does not match extent {extent}")
    out = None
    for n, c in zip(extent, center):
        g = np.exp(-((np.arange(n) - c) ** 2) / (2.0 * sigma * sigma))
        out = g if out is None else np.multiply.outer(out, g)
    return out


def splat_gaussian(out: np.ndarray, center, sigma: float, amplitude: float = 1.0,
                   radius: float = 4.0) -> None:
    """Max-combine a truncated 2D Gaussian into the 2D array ``out`` in place.

    Only cells within ``radius * sigma`` of the centre are touched; this is
    the rendering primitive used for synthetic views.
    """
    if not sigma > 0:
        raise NonPositiveSigma(f"sigma must be positive, got {sigma}")
    r, c = float(center[0]), float(center[1])
    reach = radius * sigma
    r0, r1 = max(0, int(np.ceil(r - reach))), min(out.shape[0], int(np.floor(r + reach)) + 1)
    c0, c1 = max(0, int(np.ceil(c - reach))), min(out.shape[1], int(np.floor(c + reach)) + 1)
    if r0 >= r1 or c0 >= c1:
        return
    inv = 1.0 / (2.0 * sigma * sigma)
    gr = np.exp(-((np.arange(r0, r1) - r) ** 2) * inv)
    gc = np.exp(-((np.arange(c0, c1) - c) ** 2) * inv)
    patch = amplitude * np.multiply.outer(gr, gc)
    np.maximum(out[r0:r1, c0:c1], patch, out=out[r0:r1, c0:c1])


def _softmax_weights(h: np.ndarray, temperature: float) -> np.ndarray:
    z = (h - h.max()) / temperature
    w = np.where(z < LOG_FLOOR, 0.0, np.exp(z))
    return w / w.sum()


def soft_argmax(h: np.ndarray, temperature: float = DEFAULT_TEMPERATURE) -> Peak:
    """Expected cell coordinate under ``softmax(h / temperature)`` over the whole map."""
    h = np.asarray(h, dtype=np.float64)
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    peak = float(h.max()) if h.size else 0.0
    if not peak > 0:
        raise AllZeroHeatmap("heatmap has no positive cell")
    w = _softmax_weights(h, temperature)
    pos = np.array([(w.sum(axis=tuple(a for a in range(h.ndim) if a != ax)) * np.arange(h.shape[ax])).sum()
                    for ax in range(h.ndim)])
    return Peak(pos, peak)


def soft_argmax_channels(h: np.ndarray, temperatures) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel 2D soft-argmax of a ``(rows, cols, C)`` stack.

    Returns ``(positions (C, 2), peaks (C,))``; channels without a positive
    cell get NaN positions and peak 0.
    """
    h = np.asarray(h, dtype=np.float64)
    R, C, n = h.shape
    peaks = h.reshape(-1, n).max(axis=0)
    alive = peaks > 0
    pos = np.full((n, 2), np.nan)
    if alive.any():
        t = np.broadcast_to(np.asarray(temperatures, dtype=np.float64), (n,))[alive]
        if not np.all(t > 0):
            raise ValueError("temperature must be positive")
        z = (h[..., alive] - peaks[alive]) / t
        w = np.where(z < LOG_FLOOR, 0.0, np.exp(z))
        w /= w.sum(axis=(0, 1))
        pos[alive, 0] = np.einsum("rcj,r->j", w, np.arange(R, dtype=np.float64))
        pos[alive, 1] = np.einsum("rcj,c->j", w, np.arange(C, dtype=np.float64))
    return pos, np.where(alive, peaks, 0.0)


def soft_argmax_backward(h: np.ndarray, temperature: float, grad_position) -> np.ndarray:
    """Gradient of ``grad_position . soft_argmax(h, temperature).position`` w.r.t. ``h``."""
    h = np.asarray(h, dtype=np.float64)
    w = _softmax_weights(h, temperature)
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in h.shape], indexing="ij")
    g = np.asarray(grad_position, dtype=np.float64).reshape(h.ndim)
    # projected coordinate q = g . p ; d q_mean / d h_k = w_k (q_k - q_mean) / T
    q = sum(gi * grid for gi, grid in zip(g, grids))
    return w * (q - (w * q).sum()) / temperature


def top_k_peaks(h: np.ndarray, k: int = DEFAULT_K, nms_radius: int = DEFAULT_NMS_RADIUS,
                threshold: float = DEFAULT_THRESHOLD) -> list[Peak]:
    """Greedy non-maximum suppression over a 2D map.

    Cells are visited in descending value (ties by row-major index); a
    selected cell suppresses the square window of half-width ``nms_radius``
    around it.  Cells below ``threshold`` are never selected.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    h = np.asarray(h, dtype=np.float64)
    flat = h.ravel()
    cand = np.flatnonzero(flat >= threshold)
    order = cand[np.argsort(-flat[cand], kind="stable")]
    suppressed = np.zeros(h.shape, dtype=bool)
    peaks = []
    nr, nc = h.shape
    for f in order:
        i, j = divmod(int(f), nc)
        if suppressed[i, j]:
            continue
        peaks.append(Peak(np.array([float(i), float(j)]), float(flat[f])))
        if len(peaks) == k:
            break
        suppressed[max(0, i - nms_radius):i + nms_radius + 1, max(0, j - nms_radius):j + nms_radius + 1] = True
    return peaks


def peak_1d(h: np.ndarray, temperature: float = DEFAULT_TEMPERATURE) -> tuple[float, float]:
    """Sub-cell location and height of the peak of a 1D heatmap."""
    p = soft_argmax(np.asarray(h, dtype=np.float64).ravel(), temperature)
    return float(p.position[0]), p.confidence
