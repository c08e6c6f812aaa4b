"""Small raster helpers shared by data generation, curation, and metrics."""

from __future__ import annotations

import numpy as np


def ncc(a: np.ndarray, b: np.ndarray) -> float:
    """Normalized cross-correlation of two equally-shaped arrays, in [-1, 1]."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0:
        return 0.0
    return float(np.clip(a @ b / denom, -1.0, 1.0))


def nearest_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize of an [H, W, ...] array (deterministic)."""
    h, w = img.shape[:2]
    ys = (np.arange(out_h) * h) // out_h
    xs = (np.arange(out_w) * w) // out_w
    return img[np.ix_(ys, xs)]


def bilinear_upsample(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear upsample of a coarse [gh, gw, ...] grid to [out_h, out_w, ...]."""
    gh, gw = grid.shape[:2]
    ys = np.linspace(0.0, gh - 1.0, out_h)
    xs = np.linspace(0.0, gw - 1.0, out_w)
    y0 = np.clip(np.floor(ys).astype(int), 0, gh - 2)
    x0 = np.clip(np.floor(xs).astype(int), 0, gw - 2)
    fy = (ys - y0).reshape(-1, 1)
    fx = (xs - x0).reshape(1, -1)
    while fy.ndim < grid.ndim:
        fy = fy[..., None]
        fx = fx[..., None]
    a = grid[np.ix_(y0, x0)]
    b = grid[np.ix_(y0, x0 + 1)]
    c = grid[np.ix_(y0 + 1, x0)]
    d = grid[np.ix_(y0 + 1, x0 + 1)]
    return a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx


def value_noise(h: int, w: int, rng: np.random.Generator, cell: int = 4,
                amplitude: float = 0.3) -> np.ndarray:
    """Smooth low-contrast RGB noise field in [0, amplitude]."""
    gh, gw = h // cell + 2, w // cell + 2
    grid = rng.random((gh, gw, 3))
    return (bilinear_upsample(grid, h, w) * amplitude).astype(np.float64)


def masked_ncc(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    """NCC restricted to the pixels where a 2-D bool `mask` is true."""
    return ncc(np.asarray(a)[mask], np.asarray(b)[mask])


def support(image: np.ndarray, eps: float = 1e-9) -> np.ndarray:
    """Nonzero-pixel mask of an [H, W, 3] image (glyph references are
    zero outside their shape)."""
    return np.asarray(image).sum(axis=2) > eps


def ncc_map(frame: np.ndarray, template: np.ndarray,
            mask: np.ndarray | None = None) -> np.ndarray:
    """NCC of `template` against every window of `frame`.

    frame [H, W, 3], template [h, w, 3]; returns [H-h+1, W-w+1] scores.
    A 2-D bool `mask` restricts the comparison to the template's support.
    Vectorized via sliding windows; both operands are locally mean-removed.
    """
    h, w = template.shape[:2]
    windows = np.lib.stride_tricks.sliding_window_view(frame, (h, w), axis=(0, 1))
    # windows: [Y, X, 3, h, w] -> flatten per-window
    flat = windows.transpose(0, 1, 3, 4, 2).reshape(windows.shape[0], windows.shape[1], -1)
    t = template.ravel()
    if mask is not None:
        keep = np.repeat(mask.ravel(), template.shape[2])
        flat = flat[:, :, keep]
        t = template.reshape(-1, template.shape[2])[mask.ravel()].ravel()
    flat = flat - flat.mean(axis=2, keepdims=True)
    t = t - t.mean()
    denom = np.linalg.norm(flat, axis=2) * np.linalg.norm(t)
    scores = (flat @ t)
    with np.errstate(invalid="ignore", divide="ignore"):
        scores = np.where(denom > 1e-9, scores / denom, 0.0)
    return np.clip(scores, -1.0, 1.0)
