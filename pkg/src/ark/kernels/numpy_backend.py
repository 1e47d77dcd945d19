"""Pure-numpy kernel implementations (fallback path).

Vectorized over points, looping only over polygon edges.  The arithmetic
per edge mirrors the scalar loop in numba_backend expression for
expression so the two backends agree bitwise.
"""

from __future__ import annotations

import numpy as np


def polygon_mask(px, py, xs, ys, ring_offsets):
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    inside = np.zeros(px.shape, dtype=bool)
    on_edge = np.zeros(px.shape, dtype=bool)

    for r in range(len(ring_offsets) - 1):
        lo, hi = ring_offsets[r], ring_offsets[r + 1]
        n = hi - lo
        if n < 3:
            continue
        for i in range(n):
            x1 = xs[lo + (i - 1) % n]
            y1 = ys[lo + (i - 1) % n]
            x2 = xs[lo + i]
            y2 = ys[lo + i]

            cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
            on_seg = (
                (cross == 0.0)
                & (px >= min(x1, x2))
                & (px <= max(x1, x2))
                & (py >= min(y1, y2))
                & (py <= max(y1, y2))
            )
            on_edge |= on_seg

            crosses = (y1 > py) != (y2 > py)
            if y1 != y2:
                with np.errstate(all="ignore"):
                    xint = (x2 - x1) * (py - y1) / (y2 - y1) + x1
                inside ^= crosses & (px < xint)

    return inside | on_edge


def bin_points(cols, rows, width, height):
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.asarray(rows, dtype=np.int64)
    ok = (cols >= 0) & (cols < width) & (rows >= 0) & (rows < height)
    flat = rows[ok] * width + cols[ok]
    counts = np.bincount(flat, minlength=width * height)
    return counts.reshape(height, width).astype(np.int64)


def nearest_gather(src, cols, rows, fill):
    src = np.asarray(src, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.asarray(rows, dtype=np.int64)
    h, w = src.shape
    ok = (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
    out = np.full(cols.shape, fill, dtype=np.float64)
    out[ok] = src[rows[ok], cols[ok]]
    return out
