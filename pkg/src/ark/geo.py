"""Coordinate systems, affine georeferencing, and the fixed tiling grid.

Only EPSG:4326 (lon/lat degrees) and EPSG:3857 (spherical Web-Mercator,
R = 6378137 m) are supported.  Geotransforms are north-up with zero shear.
All functions here are pure; scalars or numpy arrays go in, same comes out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, GeometryError

EARTH_RADIUS_M = 6378137.0
MERCATOR_MAX_LAT = 85.05112878
TILE_SIZE = 1024

SUPPORTED_EPSG = (4326, 3857)


@dataclass(frozen=True)
class Crs:
    epsg_code: int

    def __post_init__(self):
        if self.epsg_code not in SUPPORTED_EPSG:
            raise GeometryError(f"unsupported CRS: EPSG:{self.epsg_code}")


@dataclass(frozen=True)
class GeoExtent:
    """Axis-aligned extent; lon/lat in degrees, or metres when projected."""

    min_lon: float
    min_lat: float
    max_lon: float
    max_lat: float

    def __post_init__(self):
        if not (self.min_lon < self.max_lon and self.min_lat < self.max_lat):
            raise GeometryError(
                f"degenerate extent ({self.min_lon},{self.min_lat},{self.max_lon},{self.max_lat})"
            )

    def check_degrees(self):
        if self.min_lon < -180 or self.max_lon > 180 or self.min_lat < -90 or self.max_lat > 90:
            raise GeometryError("extent outside EPSG:4326 range")
        return self

    def as_list(self) -> list[float]:
        return [self.min_lon, self.min_lat, self.max_lon, self.max_lat]

    @classmethod
    def from_list(cls, vals) -> "GeoExtent":
        if len(vals) != 4:
            raise GeometryError("extent must be [min_lon, min_lat, max_lon, max_lat]")
        return cls(*(float(v) for v in vals))


@dataclass(frozen=True)
class Affine:
    """North-up geotransform: world = origin + pixel * size, shear fixed at 0."""

    origin_x: float
    origin_y: float
    pixel_w: float
    pixel_h: float

    def __post_init__(self):
        if not self.pixel_w > 0:
            raise GeometryError(f"pixel_w must be > 0, got {self.pixel_w}")
        if not self.pixel_h < 0:
            raise GeometryError(f"pixel_h must be < 0 (north-up), got {self.pixel_h}")

    def as_list(self) -> list[float]:
        return [self.origin_x, self.origin_y, self.pixel_w, self.pixel_h]

    @classmethod
    def from_list(cls, vals) -> "Affine":
        if len(vals) != 4:
            raise GeometryError("affine must be [origin_x, origin_y, pixel_w, pixel_h]")
        return cls(*(float(v) for v in vals))


def mercator_forward(lon, lat):
    """EPSG:4326 -> EPSG:3857.

    Latitude beyond +/-85.05112878 has no valid 3857 image and raises.
    """
    lat_arr = np.asarray(lat, dtype=np.float64)
    if np.any(np.abs(lat_arr) > MERCATOR_MAX_LAT):
        raise DomainError("latitude outside Web-Mercator domain")
    lon_arr = np.asarray(lon, dtype=np.float64)
    x = EARTH_RADIUS_M * np.radians(lon_arr)
    y = EARTH_RADIUS_M * np.log(np.tan(np.pi / 4.0 + np.radians(lat_arr) / 2.0))
    if np.isscalar(lon) or lon_arr.ndim == 0:
        return float(x), float(y)
    return x, y


def mercator_inverse(x, y):
    """EPSG:3857 -> EPSG:4326."""
    x_arr = np.asarray(x, dtype=np.float64)
    y_arr = np.asarray(y, dtype=np.float64)
    lon = np.degrees(x_arr / EARTH_RADIUS_M)
    lat = np.degrees(2.0 * np.arctan(np.exp(y_arr / EARTH_RADIUS_M)) - np.pi / 2.0)
    if np.isscalar(x) or x_arr.ndim == 0:
        return float(lon), float(lat)
    return lon, lat


def pixel_to_world(affine: Affine, col, row):
    """Fractional pixel coordinates to world; pixel centers sit at +0.5."""
    col_arr = np.asarray(col, dtype=np.float64)
    row_arr = np.asarray(row, dtype=np.float64)
    x = affine.origin_x + col_arr * affine.pixel_w
    y = affine.origin_y + row_arr * affine.pixel_h
    if np.isscalar(col) or col_arr.ndim == 0:
        return float(x), float(y)
    return x, y


def world_to_pixel(affine: Affine, x, y):
    """Exact algebraic inverse of pixel_to_world."""
    x_arr = np.asarray(x, dtype=np.float64)
    y_arr = np.asarray(y, dtype=np.float64)
    col = (x_arr - affine.origin_x) / affine.pixel_w
    row = (y_arr - affine.origin_y) / affine.pixel_h
    if np.isscalar(x) or x_arr.ndim == 0:
        return float(col), float(row)
    return col, row


def transform_points(src: Crs, dst: Crs, x, y):
    """Point transform between the two supported CRS."""
    if src == dst:
        return x, y
    if src.epsg_code == 4326 and dst.epsg_code == 3857:
        return mercator_forward(x, y)
    if src.epsg_code == 3857 and dst.epsg_code == 4326:
        return mercator_inverse(x, y)
    raise GeometryError(f"unsupported CRS pair {src} -> {dst}")


@dataclass(frozen=True)
class TileGrid:
    layer_width: int
    layer_height: int
    tile_size: int = TILE_SIZE

    def __post_init__(self):
        if self.layer_width <= 0 or self.layer_height <= 0:
            raise GeometryError("layer dimensions must be positive")

    @property
    def tiles_x(self) -> int:
        return -(-self.layer_width // self.tile_size)

    @property
    def tiles_y(self) -> int:
        return -(-self.layer_height // self.tile_size)

    def all_tiles(self) -> list[tuple[int, int]]:
        return [(tx, ty) for ty in range(self.tiles_y) for tx in range(self.tiles_x)]

    def tile_pixel_bounds(self, tx: int, ty: int) -> tuple[int, int, int, int]:
        """In-layer pixel bounds (col0, row0, col1, row1), edge tiles clipped."""
        col0 = tx * self.tile_size
        row0 = ty * self.tile_size
        col1 = min(col0 + self.tile_size, self.layer_width)
        row1 = min(row0 + self.tile_size, self.layer_height)
        return col0, row0, col1, row1


def tiles_covering(grid: TileGrid, extent: GeoExtent, affine: Affine) -> list[tuple[int, int]]:
    """Tiles whose in-layer pixel footprint intersects the extent.

    Intersection is closed-interval in pixel space: touching an edge counts.
    Disjoint extents yield an empty list.  Output is sorted by (ty, tx) and
    duplicate-free by construction.
    """
    # North-up: min_lon -> left column, max_lat -> top row.
    col_lo, row_lo = world_to_pixel(affine, extent.min_lon, extent.max_lat)
    col_hi, row_hi = world_to_pixel(affine, extent.max_lon, extent.min_lat)
    col_lo, col_hi = min(col_lo, col_hi), max(col_lo, col_hi)
    row_lo, row_hi = min(row_lo, row_hi), max(row_lo, row_hi)

    out = []
    for ty in range(grid.tiles_y):
        for tx in range(grid.tiles_x):
            c0, r0, c1, r1 = grid.tile_pixel_bounds(tx, ty)
            if c0 <= col_hi and c1 >= col_lo and r0 <= row_hi and r1 >= row_lo:
                out.append((tx, ty))
    return out


def layer_extent(affine: Affine, width: int, height: int) -> GeoExtent:
    x0, y0 = pixel_to_world(affine, 0, 0)
    x1, y1 = pixel_to_world(affine, width, height)
    return GeoExtent(min(x0, x1), min(y0, y1), max(x0, x1), max(y0, y1))
