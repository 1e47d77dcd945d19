"""Numba-jitted kernel implementations (default path).

Scalar loops compiled with nopython mode, no fastmath, so floating-point
results match the numpy backend exactly.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def _polygon_mask(px, py, xs, ys, ring_offsets):
    npts = px.shape[0]
    out = np.zeros(npts, dtype=np.bool_)
    for p in range(npts):
        x = px[p]
        y = py[p]
        inside = False
        on_edge = False
        for r in range(ring_offsets.shape[0] - 1):
            lo = ring_offsets[r]
            hi = ring_offsets[r + 1]
            n = hi - lo
            if n < 3:
                continue
            for i in range(n):
                x1 = xs[lo + (i - 1) % n]
                y1 = ys[lo + (i - 1) % n]
                x2 = xs[lo + i]
                y2 = ys[lo + i]

                cross = (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1)
                if (
                    cross == 0.0
                    and x >= min(x1, x2)
                    and x <= max(x1, x2)
                    and y >= min(y1, y2)
                    and y <= max(y1, y2)
                ):
                    on_edge = True
                    break

                if (y1 > y) != (y2 > y):
                    xint = (x2 - x1) * (y - y1) / (y2 - y1) + x1
                    if x < xint:
                        inside = not inside
            if on_edge:
                break
        out[p] = inside or on_edge
    return out


@njit(cache=True, nogil=True)
def _bin_points(cols, rows, width, height):
    out = np.zeros((height, width), dtype=np.int64)
    for i in range(cols.shape[0]):
        c = cols[i]
        r = rows[i]
        if 0 <= c < width and 0 <= r < height:
            out[r, c] += 1
    return out


@njit(cache=True, nogil=True)
def _nearest_gather(src, cols, rows, fill):
    h, w = src.shape
    out = np.empty(cols.shape[0], dtype=np.float64)
    for i in range(cols.shape[0]):
        c = cols[i]
        r = rows[i]
        if 0 <= c < w and 0 <= r < h:
            out[i] = src[r, c]
        else:
            out[i] = fill
    return out


def polygon_mask(px, py, xs, ys, ring_offsets):
    return _polygon_mask(
        np.ascontiguousarray(px, dtype=np.float64),
        np.ascontiguousarray(py, dtype=np.float64),
        np.ascontiguousarray(xs, dtype=np.float64),
        np.ascontiguousarray(ys, dtype=np.float64),
        np.ascontiguousarray(ring_offsets, dtype=np.int64),
    )


def bin_points(cols, rows, width, height):
    return _bin_points(
        np.ascontiguousarray(cols, dtype=np.int64),
        np.ascontiguousarray(rows, dtype=np.int64),
        int(width),
        int(height),
    )


def nearest_gather(src, cols, rows, fill):
    return _nearest_gather(
        np.ascontiguousarray(src, dtype=np.float64),
        np.ascontiguousarray(cols, dtype=np.int64),
        np.ascontiguousarray(rows, dtype=np.int64),
        float(fill),
    )
