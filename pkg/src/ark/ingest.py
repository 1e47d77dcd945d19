"""Bring external data under content addressing.

Rasters are tiled to the fixed grid, edge tiles padded to full size (with
NODATA when the layer defines it, zero otherwise; the manifest's true
width/height clip every read), hashed, and committed.  Point and polygon
collections become single canonical JSON objects.  Every ingested thing
carries a label, even if empty.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .chunk import NUMPY_DTYPES, Chunk
from .clock import format_instant, now, parse_instant
from .difc import Label
from .errors import GeometryError, MetadataError, ParseError, ValidationError
from .geo import Affine, Crs, TileGrid
from .store import ChunkStore, LayerVersion, commit_layer
from .tiff import read_geotiff

CSV_HEADER = ["lon", "lat", "time", "value", "category"]


# -- layer <-> array ---------------------------------------------------------


def write_layer_version(
    store: ChunkStore,
    layer_name: str,
    values: np.ndarray,
    dtype: str,
    crs: Crs,
    affine: Affine,
    nodata: Optional[float],
    label: Label,
    time_stamp: Optional[str] = None,
) -> LayerVersion:
    """Tile, pad, hash, and store one band; returns an uncommitted version."""
    height, width = values.shape
    grid = TileGrid(width, height)
    pad_value = nodata if nodata is not None else 0
    npdt = NUMPY_DTYPES[dtype]
    chunk_map = {}
    for tx, ty in grid.all_tiles():
        x0, y0, x1, y1 = grid.tile_pixel_bounds(tx, ty)
        tile = np.full((grid.tile_size, grid.tile_size), pad_value, dtype=npdt)
        tile[: y1 - y0, : x1 - x0] = values[y0:y1, x0:x1]
        chunk = Chunk(dtype, grid.tile_size, grid.tile_size, nodata, tile)
        chunk_map[(1, tx, ty)] = store.put_chunk(chunk)
    return LayerVersion(
        layer_name=layer_name,
        crs=crs,
        affine=affine,
        width=width,
        height=height,
        dtype=dtype,
        nodata=nodata,
        band_count=1,
        time_stamp=time_stamp,
        label=label,
        chunk_map=chunk_map,
    )


def read_layer_array(store: ChunkStore, version: LayerVersion, band: int = 1) -> np.ndarray:
    """Reassemble one band into a (height, width) array, clipping tile pads."""
    npdt = NUMPY_DTYPES[version.dtype]
    out = np.empty((version.height, version.width), dtype=npdt)
    grid = version.grid
    for tx, ty in grid.all_tiles():
        chunk = store.get_chunk(version.chunk_map[(band, tx, ty)])
        x0, y0, x1, y1 = grid.tile_pixel_bounds(tx, ty)
        out[y0:y1, x0:x1] = chunk.values[: y1 - y0, : x1 - x0]
    return out


def ingest_prov(store: ChunkStore, version: LayerVersion, source: str) -> str:
    """Leaf provenance record for every chunk of an ingested version."""
    manifest_hash = version.manifest_hash
    node = {
        "kind": "prov",
        "op": "ingest",
        "version": "1.0.0",
        "params": {"source": source, "layer": version.layer_name},
        "inputs": {},
        "outputs": [manifest_hash],
        "label": version.label.as_list(),
        "declass": [],
    }
    prov_hash = store.put_obj(node)
    store.prov_put(manifest_hash, prov_hash)
    for ref in version.chunk_map.values():
        store.prov_put(ref, prov_hash)
    return prov_hash


def object_prov(store: ChunkStore, ref: str, label: Label, source: str) -> str:
    """Leaf provenance record for a non-raster ingested object."""
    node = {
        "kind": "prov",
        "op": "ingest",
        "version": "1.0.0",
        "params": {"source": source},
        "inputs": {},
        "outputs": [ref],
        "label": label.as_list(),
        "declass": [],
    }
    prov_hash = store.put_obj(node)
    store.prov_put(ref, prov_hash)
    return prov_hash


# -- GeoTIFF -----------------------------------------------------------------


def import_geotiff(
    store: ChunkStore,
    layer_name: str,
    path,
    label: Label,
    time_stamp: Optional[str] = None,
    message: str = "ingest",
) -> dict:
    img = read_geotiff(path)
    if img.affine is None:
        raise MetadataError(f"{path}: no georeferencing tags")
    crs = img.crs()
    if time_stamp is not None:
        time_stamp = format_instant(parse_instant(time_stamp))
    version = write_layer_version(
        store, layer_name, img.values, img.dtype, crs, img.affine,
        img.nodata, label, time_stamp,
    )
    parent = store.read_ref(layer_name)
    commit_hash, manifest_hash = commit_layer(
        store, version, parent, message, format_instant(now())
    )
    ingest_prov(store, version, str(path))
    return {
        "layer": layer_name,
        "commit": commit_hash,
        "manifest": manifest_hash,
        "width": version.width,
        "height": version.height,
        "dtype": version.dtype,
        "tiles": len(version.chunk_map),
    }


# -- points ------------------------------------------------------------------


@dataclass
class PointSet:
    lons: np.ndarray
    lats: np.ndarray
    times: list[str]
    values: np.ndarray
    categories: list[str]
    label: Label

    def __len__(self) -> int:
        return len(self.times)

    def as_obj(self) -> dict:
        return {
            "kind": "points",
            "records": [
                [float(self.lons[i]), float(self.lats[i]), self.times[i],
                 float(self.values[i]), self.categories[i]]
                for i in range(len(self))
            ],
            "label": self.label.as_list(),
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "PointSet":
        if obj.get("kind") != "points":
            raise ValidationError("object is not a point set")
        recs = obj["records"]
        return cls(
            lons=np.array([r[0] for r in recs], dtype=np.float64),
            lats=np.array([r[1] for r in recs], dtype=np.float64),
            times=[r[2] for r in recs],
            values=np.array([r[3] for r in recs], dtype=np.float64),
            categories=[r[4] for r in recs],
            label=Label.from_list(obj["label"]),
        )


def import_points_csv(store: ChunkStore, path, label: Label) -> tuple[str, PointSet]:
    """Parse the fixed-header CSV; any malformed row fails the whole import."""
    problems: list[str] = []
    lons, lats, times, values, cats = [], [], [], [], []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file", 0)
        if header != CSV_HEADER:
            raise ParseError(
                f"{path}: header must be exactly {','.join(CSV_HEADER)}", 0
            )
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                problems.append(f"line {line_no}: expected 5 fields, got {len(row)}")
                continue
            try:
                lon = float(row[0])
                lat = float(row[1])
            except ValueError:
                problems.append(f"line {line_no}: unparseable coordinate")
                continue
            if not (-180.0 <= lon <= 180.0 and -90.0 <= lat <= 90.0):
                problems.append(f"line {line_no}: lon/lat out of range ({lon}, {lat})")
                continue
            try:
                when = format_instant(parse_instant(row[2]))
            except Exception:
                problems.append(f"line {line_no}: bad time {row[2]!r}")
                continue
            try:
                value = float(row[3])
            except ValueError:
                problems.append(f"line {line_no}: bad value {row[3]!r}")
                continue
            lons.append(lon)
            lats.append(lat)
            times.append(when)
            values.append(value)
            cats.append(row[4])
    if problems:
        shown = "; ".join(problems[:5])
        more = f" (+{len(problems) - 5} more)" if len(problems) > 5 else ""
        raise ParseError(f"{path}: {shown}{more}", 0)
    points = PointSet(
        np.array(lons), np.array(lats), times, np.array(values), cats, label
    )
    ref = store.put_obj(points.as_obj())
    object_prov(store, ref, label, str(path))
    return ref, points


# -- polygons ----------------------------------------------------------------


@dataclass
class PolygonSet:
    """Polygons as open rings (no repeated closing vertex), lon/lat order.

    Ring 0 of each polygon is the exterior (counter-clockwise); the rest are
    holes (clockwise).
    """

    polygons: list[list[np.ndarray]] = field(default_factory=list)
    label: Label = field(default_factory=Label.bottom)

    def __len__(self) -> int:
        return len(self.polygons)

    def as_obj(self) -> dict:
        return {
            "kind": "polygons",
            "polygons": [
                [[[float(x), float(y)] for x, y in ring] for ring in poly]
                for poly in self.polygons
            ],
            "label": self.label.as_list(),
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "PolygonSet":
        if obj.get("kind") != "polygons":
            raise ValidationError("object is not a polygon set")
        polys = [
            [np.asarray(ring, dtype=np.float64) for ring in poly]
            for poly in obj["polygons"]
        ]
        return cls(polys, Label.from_list(obj["label"]))


def ring_area(ring: np.ndarray) -> float:
    """Signed shoelace area of an open ring; positive = counter-clockwise."""
    x = ring[:, 0]
    y = ring[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _normalize_ring(coords, want_ccw: bool) -> np.ndarray:
    arr = np.asarray(coords, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] < 2:
        raise GeometryError("ring must be a list of [lon, lat] positions")
    if len(arr) < 4 or not np.array_equal(arr[0], arr[-1]):
        raise GeometryError("unclosed ring (first and last positions must match)")
    ring = arr[:-1, :2]
    if len(ring) < 3:
        raise GeometryError("ring needs at least 3 distinct vertices")
    area = ring_area(ring)
    if (area > 0) != want_ccw and area != 0:
        ring = ring[::-1].copy()
    return ring


def _polygon_rings(coords) -> list[np.ndarray]:
    if not coords:
        raise GeometryError("polygon with no rings")
    rings = [_normalize_ring(coords[0], want_ccw=True)]
    for hole in coords[1:]:
        rings.append(_normalize_ring(hole, want_ccw=False))
    return rings


def import_geojson_polygons(store: ChunkStore, path, label: Label) -> tuple[str, PolygonSet]:
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("type") != "FeatureCollection":
        raise GeometryError("expected a FeatureCollection")
    polygons: list[list[np.ndarray]] = []
    for i, feature in enumerate(doc.get("features", [])):
        geom = feature.get("geometry") or {}
        gtype = geom.get("type")
        if gtype == "Polygon":
            polygons.append(_polygon_rings(geom.get("coordinates", [])))
        elif gtype == "MultiPolygon":
            for part in geom.get("coordinates", []):
                polygons.append(_polygon_rings(part))
        else:
            raise GeometryError(f"feature {i}: unsupported geometry type {gtype!r}")
    pset = PolygonSet(polygons, label)
    ref = store.put_obj(pset.as_obj())
    object_prov(store, ref, label, str(path))
    return ref, pset
