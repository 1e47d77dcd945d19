"""Minimal reader for a narrow, auditable GeoTIFF subset.

Accepted: classic little-endian TIFF, single band, one of u8/i16/i32/f32,
compression none or Deflate, strip or tiled layout, predictor 1.
Georeferencing comes from ModelPixelScale + ModelTiepoint, the CRS from a
GeoKeyDirectory EPSG code, and the optional GDAL_NODATA ASCII tag.
Anything outside that subset raises UnsupportedFormatError; this is a
deliberate trade of generality for a parser short enough to audit.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import MetadataError, UnsupportedFormatError
from .geo import Affine, Crs

TAG_IMAGE_WIDTH = 256
TAG_IMAGE_LENGTH = 257
TAG_BITS_PER_SAMPLE = 258
TAG_COMPRESSION = 259
TAG_STRIP_OFFSETS = 273
TAG_SAMPLES_PER_PIXEL = 277
TAG_ROWS_PER_STRIP = 278
TAG_STRIP_BYTE_COUNTS = 279
TAG_PLANAR_CONFIG = 284
TAG_PREDICTOR = 317
TAG_TILE_WIDTH = 322
TAG_TILE_LENGTH = 323
TAG_TILE_OFFSETS = 324
TAG_TILE_BYTE_COUNTS = 325
TAG_SAMPLE_FORMAT = 339
TAG_MODEL_PIXEL_SCALE = 33550
TAG_MODEL_TIEPOINT = 33922
TAG_GEO_KEY_DIRECTORY = 34735
TAG_GDAL_NODATA = 42113

GEOKEY_GEOGRAPHIC_TYPE = 2048
GEOKEY_PROJECTED_CS_TYPE = 3072

_TYPE_SIZES = {1: 1, 2: 1, 3: 2, 4: 4, 5: 8, 11: 4, 12: 8}
_TYPE_FMT = {1: "B", 3: "H", 4: "I", 11: "f", 12: "d"}

# (bits, sample_format) -> our dtype name; sample format 1=unsigned 2=signed 3=float
_PIXEL_TYPES = {
    (8, 1): ("u8", np.dtype("<u1")),
    (16, 2): ("i16", np.dtype("<i2")),
    (32, 2): ("i32", np.dtype("<i4")),
    (32, 3): ("f32", np.dtype("<f4")),
}


@dataclass
class TiffImage:
    width: int
    height: int
    dtype: str
    values: np.ndarray
    nodata: Optional[float]
    epsg: Optional[int]
    affine: Optional[Affine]

    def crs(self) -> Crs:
        if self.epsg is None:
            raise MetadataError("file carries no CRS")
        return Crs(self.epsg)


def _read_entries(data: bytes, ifd_offset: int) -> dict[int, tuple[int, int, bytes]]:
    """Map tag -> (type, count, raw value bytes) for the first IFD."""
    if ifd_offset + 2 > len(data):
        raise UnsupportedFormatError("truncated file: IFD out of range")
    (n,) = struct.unpack_from("<H", data, ifd_offset)
    entries = {}
    for i in range(n):
        off = ifd_offset + 2 + 12 * i
        if off + 12 > len(data):
            raise UnsupportedFormatError("truncated IFD entry")
        tag, typ, count = struct.unpack_from("<HHI", data, off)
        if typ not in _TYPE_SIZES:
            continue  # tags of exotic types are skipped, not fatal
        nbytes = _TYPE_SIZES[typ] * count
        if nbytes <= 4:
            raw = data[off + 8 : off + 8 + nbytes]
        else:
            (ptr,) = struct.unpack_from("<I", data, off + 8)
            if ptr + nbytes > len(data):
                raise UnsupportedFormatError(f"tag {tag} value out of range")
            raw = data[ptr : ptr + nbytes]
        entries[tag] = (typ, count, raw)
    return entries


def _values(entries, tag) -> Optional[list]:
    if tag not in entries:
        return None
    typ, count, raw = entries[tag]
    if typ == 2:
        return [raw.split(b"\x00", 1)[0].decode("ascii", "replace")]
    fmt = _TYPE_FMT.get(typ)
    if fmt is None:
        raise UnsupportedFormatError(f"tag {tag} has unsupported type {typ}")
    return list(struct.unpack(f"<{count}{fmt}", raw))


def _scalar(entries, tag, default=None):
    vals = _values(entries, tag)
    if vals is None:
        return default
    return vals[0]


def _decompress(block: bytes, compression: int) -> bytes:
    if compression == 1:
        return block
    try:
        return zlib.decompress(block)
    except zlib.error as exc:
        raise UnsupportedFormatError(f"bad deflate stream: {exc}") from exc


def _parse_geokeys(entries) -> Optional[int]:
    shorts = _values(entries, TAG_GEO_KEY_DIRECTORY)
    if shorts is None or len(shorts) < 4:
        return None
    n_keys = shorts[3]
    for k in range(n_keys):
        base = 4 + 4 * k
        if base + 4 > len(shorts):
            break
        key_id, location, count, value = shorts[base : base + 4]
        if key_id in (GEOKEY_GEOGRAPHIC_TYPE, GEOKEY_PROJECTED_CS_TYPE) and location == 0:
            return int(value)
    return None


def read_geotiff(path) -> TiffImage:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 8:
        raise UnsupportedFormatError("too short to be a TIFF")
    if data[:2] == b"MM":
        raise UnsupportedFormatError("big-endian TIFF is outside the supported subset")
    if data[:2] != b"II":
        raise UnsupportedFormatError("not a TIFF file")
    (magic,) = struct.unpack_from("<H", data, 2)
    if magic == 43:
        raise UnsupportedFormatError("BigTIFF is outside the supported subset")
    if magic != 42:
        raise UnsupportedFormatError("not a TIFF file")
    (ifd_offset,) = struct.unpack_from("<I", data, 4)
    entries = _read_entries(data, ifd_offset)

    width = _scalar(entries, TAG_IMAGE_WIDTH)
    height = _scalar(entries, TAG_IMAGE_LENGTH)
    if not width or not height:
        raise UnsupportedFormatError("missing image dimensions")
    width, height = int(width), int(height)

    samples = int(_scalar(entries, TAG_SAMPLES_PER_PIXEL, 1))
    if samples != 1:
        raise UnsupportedFormatError(f"{samples} samples per pixel; only single-band supported")
    planar = int(_scalar(entries, TAG_PLANAR_CONFIG, 1))
    if planar != 1:
        raise UnsupportedFormatError("planar configuration other than chunky")
    predictor = int(_scalar(entries, TAG_PREDICTOR, 1))
    if predictor != 1:
        raise UnsupportedFormatError(f"predictor {predictor} not supported")

    bits = int(_scalar(entries, TAG_BITS_PER_SAMPLE, 1))
    sample_format = int(_scalar(entries, TAG_SAMPLE_FORMAT, 1))
    if (bits, sample_format) not in _PIXEL_TYPES:
        raise UnsupportedFormatError(
            f"pixel type bits={bits} format={sample_format} outside supported subset"
        )
    dtype_name, npdt = _PIXEL_TYPES[(bits, sample_format)]

    compression = int(_scalar(entries, TAG_COMPRESSION, 1))
    if compression not in (1, 8, 32946):  # none, and both registered Deflate codes
        raise UnsupportedFormatError(f"compression {compression} not supported")

    itemsize = npdt.itemsize
    out = np.empty((height, width), dtype=npdt)

    if TAG_TILE_OFFSETS in entries:
        tw = int(_scalar(entries, TAG_TILE_WIDTH))
        th = int(_scalar(entries, TAG_TILE_LENGTH))
        offsets = _values(entries, TAG_TILE_OFFSETS)
        counts = _values(entries, TAG_TILE_BYTE_COUNTS)
        across = -(-width // tw)
        down = -(-height // th)
        if len(offsets) != across * down or len(counts) != len(offsets):
            raise UnsupportedFormatError("tile index tables do not match the grid")
        for ti in range(down):
            for tj in range(across):
                idx = ti * across + tj
                block = _decompress(
                    data[offsets[idx] : offsets[idx] + counts[idx]], compression
                )
                if len(block) != tw * th * itemsize:
                    raise UnsupportedFormatError(f"tile {idx} has wrong decoded size")
                tile = np.frombuffer(block, dtype=npdt).reshape(th, tw)
                rows = min(th, height - ti * th)
                cols = min(tw, width - tj * tw)
                out[ti * th : ti * th + rows, tj * tw : tj * tw + cols] = tile[:rows, :cols]
    elif TAG_STRIP_OFFSETS in entries:
        rows_per_strip = int(_scalar(entries, TAG_ROWS_PER_STRIP, height))
        offsets = _values(entries, TAG_STRIP_OFFSETS)
        counts = _values(entries, TAG_STRIP_BYTE_COUNTS)
        n_strips = -(-height // rows_per_strip)
        if len(offsets) != n_strips or len(counts) != n_strips:
            raise UnsupportedFormatError("strip index tables do not match the image")
        row = 0
        for idx in range(n_strips):
            block = _decompress(data[offsets[idx] : offsets[idx] + counts[idx]], compression)
            rows = min(rows_per_strip, height - row)
            if len(block) != rows * width * itemsize:
                raise UnsupportedFormatError(f"strip {idx} has wrong decoded size")
            out[row : row + rows] = np.frombuffer(block, dtype=npdt).reshape(rows, width)
            row += rows
    else:
        raise UnsupportedFormatError("neither strip nor tile layout present")

    nodata = None
    nd_text = _scalar(entries, TAG_GDAL_NODATA)
    if nd_text is not None:
        try:
            nodata = float(nd_text.strip())
        except ValueError:
            raise MetadataError(f"unparseable nodata text {nd_text!r}")

    affine = None
    scale = _values(entries, TAG_MODEL_PIXEL_SCALE)
    tiepoint = _values(entries, TAG_MODEL_TIEPOINT)
    if scale is not None and tiepoint is not None and len(scale) >= 2 and len(tiepoint) >= 6:
        sx, sy = float(scale[0]), float(scale[1])
        i, j, _, x, y = (float(v) for v in tiepoint[:5])
        # tiepoint maps raster point (i, j) to world (x, y); scale is per pixel
        affine = Affine(x - i * sx, y + j * sy, sx, -sy)

    return TiffImage(
        width=width,
        height=height,
        dtype=dtype_name,
        values=out,
        nodata=nodata,
        epsg=_parse_geokeys(entries),
        affine=affine,
    )
