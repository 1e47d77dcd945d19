"""Spatial operations over aligned arrays: zonal stats, point binning with
privacy suppression, change masks, nearest-neighbor reprojection.

Everything here is pure and array-in/array-out; wiring to stored layers and
tiles lives in the dataflow module.  Zone membership uses pixel centers and
the even-odd rule with on-boundary counting as inside, matching the
brute-force oracle the tests run against.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .algebra import eval_chunk, parse
from .chunk import NUMPY_DTYPES, Chunk
from .errors import DomainError, GeometryError
from .geo import Affine, Crs, transform_points

# Sentinels for outputs that need one but whose source defines none.
DEFAULT_NODATA = {"u8": 255.0, "i16": -32768.0, "i32": -2147483648.0,
                  "f32": -3.4e38, "f64": -3.4e38}

DIFF_NODATA = 255.0
COUNT_NODATA = -1.0


@dataclass
class ZoneStats:
    count: int
    total: Optional[float]
    mean: Optional[float]
    minimum: Optional[float]
    maximum: Optional[float]

    def as_obj(self) -> dict:
        return {
            "count": self.count,
            "sum": self.total,
            "mean": self.mean,
            "min": self.minimum,
            "max": self.maximum,
        }


class ZoneAccumulator:
    """Running (count, sum, min, max) per zone; combines associatively."""

    def __init__(self, n_zones: int):
        self.counts = np.zeros(n_zones, dtype=np.int64)
        self.sums = np.zeros(n_zones, dtype=np.float64)
        self.mins = np.full(n_zones, np.inf)
        self.maxs = np.full(n_zones, -np.inf)

    def add_pixels(self, zone: int, values: np.ndarray):
        if values.size == 0:
            return
        self.counts[zone] += values.size
        self.sums[zone] += float(values.sum(dtype=np.float64))
        self.mins[zone] = min(self.mins[zone], float(values.min()))
        self.maxs[zone] = max(self.maxs[zone], float(values.max()))

    def merge(self, other: "ZoneAccumulator"):
        self.counts += other.counts
        self.sums += other.sums
        self.mins = np.minimum(self.mins, other.mins)
        self.maxs = np.maximum(self.maxs, other.maxs)

    def as_obj(self) -> dict:
        return {
            "counts": self.counts.tolist(),
            "sums": self.sums.tolist(),
            "mins": [None if not np.isfinite(v) else v for v in self.mins.tolist()],
            "maxs": [None if not np.isfinite(v) else v for v in self.maxs.tolist()],
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "ZoneAccumulator":
        acc = cls(len(obj["counts"]))
        acc.counts = np.asarray(obj["counts"], dtype=np.int64)
        acc.sums = np.asarray(obj["sums"], dtype=np.float64)
        acc.mins = np.asarray(
            [np.inf if v is None else v for v in obj["mins"]], dtype=np.float64
        )
        acc.maxs = np.asarray(
            [-np.inf if v is None else v for v in obj["maxs"]], dtype=np.float64
        )
        return acc

    def finish(self) -> list[ZoneStats]:
        out = []
        for i in range(len(self.counts)):
            c = int(self.counts[i])
            if c == 0:
                out.append(ZoneStats(0, None, None, None, None))
            else:
                s = float(self.sums[i])
                out.append(ZoneStats(c, s, s / c, float(self.mins[i]), float(self.maxs[i])))
        return out


def pixel_center_coords(affine: Affine, px0: int, py0: int, w: int, h: int):
    """World coordinates of pixel centers for a w x h window at (px0, py0)."""
    cols = px0 + np.arange(w, dtype=np.float64) + 0.5
    rows = py0 + np.arange(h, dtype=np.float64) + 0.5
    xs = affine.origin_x + cols * affine.pixel_w
    ys = affine.origin_y + rows * affine.pixel_h
    return np.meshgrid(xs, ys)


def pack_rings(rings: Sequence[np.ndarray]):
    """Flatten a ring list into the (xs, ys, offsets) layout the kernels take."""
    xs = np.concatenate([np.asarray(r, dtype=np.float64)[:, 0] for r in rings])
    ys = np.concatenate([np.asarray(r, dtype=np.float64)[:, 1] for r in rings])
    offsets = np.zeros(len(rings) + 1, dtype=np.int64)
    np.cumsum([len(r) for r in rings], out=offsets[1:])
    return xs, ys, offsets


def zonal_accumulate(
    chunk: Chunk,
    affine: Affine,
    px0: int,
    py0: int,
    rings_per_zone: Sequence[Sequence[np.ndarray]],
) -> ZoneAccumulator:
    """Accumulate stats for one window of pixels against every zone.

    ``rings_per_zone[z]`` is the zone's rings as (n, 2) arrays, already in
    the raster's CRS.  Window size comes from the chunk (which may be an
    edge tile clipped to the layer).
    """
    h, w = chunk.values.shape
    gx, gy = pixel_center_coords(affine, px0, py0, w, h)
    flat_x = gx.ravel()
    flat_y = gy.ravel()
    valid = chunk.valid_mask().ravel()
    vals = chunk.values.ravel()
    acc = ZoneAccumulator(len(rings_per_zone))
    for z, rings in enumerate(rings_per_zone):
        # cheap bbox rejection before the kernel
        bx0 = min(float(r[:, 0].min()) for r in rings)
        bx1 = max(float(r[:, 0].max()) for r in rings)
        by0 = min(float(r[:, 1].min()) for r in rings)
        by1 = max(float(r[:, 1].max()) for r in rings)
        narrow = (flat_x >= bx0) & (flat_x <= bx1) & (flat_y >= by0) & (flat_y <= by1)
        narrow &= valid
        if not narrow.any():
            continue
        xs, ys, offsets = pack_rings(rings)
        inside = kernels.polygon_mask(flat_x[narrow], flat_y[narrow], xs, ys, offsets)
        acc.add_pixels(z, vals[narrow][inside].astype(np.float64))
    return acc


def bin_points_window(
    lons: np.ndarray,
    lats: np.ndarray,
    affine: Affine,
    px0: int,
    py0: int,
    w: int,
    h: int,
    min_count: int,
) -> Chunk:
    """Per-pixel point counts for a window, with small counts suppressed.

    A point lands in the pixel containing it; counts c with 0 < c < min_count
    come out as NODATA so sparse cells never reveal point locations.
    """
    if min_count < 1:
        raise DomainError("min_count must be >= 1")
    col = np.floor((lons - affine.origin_x) / affine.pixel_w - px0)
    row = np.floor((lats - affine.origin_y) / affine.pixel_h - py0)
    counts = kernels.bin_points(col, row, w, h).astype(np.int64)
    out = counts.astype(np.int32)
    if min_count > 1:
        suppress = (counts > 0) & (counts < min_count)
        out[suppress] = np.int32(COUNT_NODATA)
    return Chunk("i32", w, h, COUNT_NODATA, out)


def diff_window(a: Chunk, b: Chunk, predicate) -> tuple[Chunk, int]:
    """Change mask for one aligned window: 1 changed, 0 same, 255 no data.

    ``predicate`` is an expression (or its source text) over bands A.b1
    and B.b1.
    """
    if a.values.shape != b.values.shape:
        raise GeometryError("change detection needs identical window shapes")
    if isinstance(predicate, str):
        predicate = parse(predicate)
    result = eval_chunk(predicate, {"A": {1: a}, "B": {1: b}})
    ok = result.valid_mask()
    mask = np.where(ok, (result.values != 0) & ok, False).astype(np.uint8)
    mask[~ok] = np.uint8(DIFF_NODATA)
    h, w = mask.shape
    changed = int((mask == 1).sum())
    return Chunk("u8", w, h, DIFF_NODATA, mask), changed


def reproject_window(
    src_values: np.ndarray,
    src_valid: np.ndarray,
    src_crs: Crs,
    src_affine: Affine,
    dst_crs: Crs,
    dst_affine: Affine,
    px0: int,
    py0: int,
    w: int,
    h: int,
    out_dtype: str,
    out_nodata: float,
) -> Chunk:
    """Nearest-neighbor resample of a full source array into one dest window."""
    gx, gy = pixel_center_coords(dst_affine, px0, py0, w, h)
    sx, sy = transform_points(dst_crs, src_crs, gx.ravel(), gy.ravel())
    col = np.floor((sx - src_affine.origin_x) / src_affine.pixel_w)
    row = np.floor((sy - src_affine.origin_y) / src_affine.pixel_h)
    vals = kernels.nearest_gather(
        src_values.astype(np.float64), col, row, float(out_nodata)
    )
    sh, sw = src_values.shape
    inb = (col >= 0) & (col < sw) & (row >= 0) & (row < sh)
    if not src_valid.all():
        src_ok = src_valid.ravel()
        idx = (row.astype(np.int64) * sw + col.astype(np.int64))[inb]
        keep = np.ones(vals.shape, dtype=bool)
        keep[inb] = src_ok[idx]
        vals = np.where(keep, vals, float(out_nodata))
    out = vals.reshape(h, w).astype(NUMPY_DTYPES[out_dtype])
    return Chunk(out_dtype, w, h, out_nodata, out)
