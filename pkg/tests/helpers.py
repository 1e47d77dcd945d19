"""Fixture builders shared by the test suite.

`write_geotiff` emits the narrow TIFF subset the reader accepts (classic
little-endian, single band, strip or tiled, none/deflate) so tests can
exercise ingest without external tooling.  Kept deliberately independent
of the reader: it assembles IFD bytes by hand.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

_PIXEL = {
    np.dtype("<u1"): (8, 1),
    np.dtype("<i2"): (16, 2),
    np.dtype("<i4"): (32, 2),
    np.dtype("<f4"): (32, 3),
}

_SHORT, _LONG, _DOUBLE, _ASCII = 3, 4, 12, 2


def _entry(tag: int, typ: int, values, out_of_line: list) -> bytes:
    if typ == _ASCII:
        payload = values  # bytes, NUL-terminated by caller
        count = len(payload)
    else:
        fmt = {_SHORT: "H", _LONG: "I", _DOUBLE: "d"}[typ]
        count = len(values)
        payload = struct.pack(f"<{count}{fmt}", *values)
    if len(payload) <= 4:
        return struct.pack("<HHI", tag, typ, count) + payload.ljust(4, b"\x00")
    placeholder = len(out_of_line)
    out_of_line.append(payload)
    return struct.pack("<HHI", tag, typ, count) + struct.pack("<I", 0xEEEE0000 + placeholder)


def write_geotiff(
    path,
    values: np.ndarray,
    epsg: int,
    affine,  # (origin_x, origin_y, pixel_w, pixel_h), pixel_h < 0
    nodata: float | None = None,
    tiled: bool = False,
    tile_size: int = 16,
    compression: str = "none",
    rows_per_strip: int | None = None,
) -> Path:
    values = np.ascontiguousarray(values)
    if values.dtype not in _PIXEL:
        raise ValueError(f"unsupported fixture dtype {values.dtype}")
    bits, fmt_code = _PIXEL[values.dtype]
    height, width = values.shape
    comp_code = {"none": 1, "deflate": 8}[compression]

    def pack(block: np.ndarray) -> bytes:
        raw = block.tobytes()
        return zlib.compress(raw) if comp_code == 8 else raw

    blocks: list[bytes] = []
    if tiled:
        across = -(-width // tile_size)
        down = -(-height // tile_size)
        for ti in range(down):
            for tj in range(across):
                tile = np.zeros((tile_size, tile_size), dtype=values.dtype)
                ys = slice(ti * tile_size, min((ti + 1) * tile_size, height))
                xs = slice(tj * tile_size, min((tj + 1) * tile_size, width))
                tile[: ys.stop - ys.start, : xs.stop - xs.start] = values[ys, xs]
                blocks.append(pack(tile))
    else:
        rps = rows_per_strip or height
        for row in range(0, height, rps):
            blocks.append(pack(values[row : row + rps]))

    data_area = bytearray()
    offsets = []
    base = 8
    for block in blocks:
        offsets.append(base + len(data_area))
        data_area.extend(block)
        if len(data_area) % 2:
            data_area.append(0)

    origin_x, origin_y, pixel_w, pixel_h = affine
    geo_key = 2048 if epsg == 4326 else 3072
    out_of_line: list[bytes] = []
    entries = [
        _entry(256, _LONG, [width], out_of_line),
        _entry(257, _LONG, [height], out_of_line),
        _entry(258, _SHORT, [bits], out_of_line),
        _entry(259, _SHORT, [comp_code], out_of_line),
        _entry(262, _SHORT, [1], out_of_line),
        _entry(277, _SHORT, [1], out_of_line),
        _entry(339, _SHORT, [fmt_code], out_of_line),
        _entry(33550, _DOUBLE, [pixel_w, -pixel_h, 0.0], out_of_line),
        _entry(33922, _DOUBLE, [0.0, 0.0, 0.0, origin_x, origin_y, 0.0], out_of_line),
        _entry(34735, _SHORT, [1, 1, 0, 1, geo_key, 0, 1, epsg], out_of_line),
    ]
    counts = [len(b) for b in blocks]
    if tiled:
        entries.append(_entry(322, _LONG, [tile_size], out_of_line))
        entries.append(_entry(323, _LONG, [tile_size], out_of_line))
        entries.append(_entry(324, _LONG, offsets, out_of_line))
        entries.append(_entry(325, _LONG, counts, out_of_line))
    else:
        entries.append(_entry(273, _LONG, offsets, out_of_line))
        entries.append(_entry(278, _LONG, [rows_per_strip or height], out_of_line))
        entries.append(_entry(279, _LONG, counts, out_of_line))
    if nodata is not None:
        text = (f"{nodata:g}").encode("ascii") + b"\x00"
        entries.append(_entry(42113, _ASCII, text, out_of_line))
    entries.sort(key=lambda e: struct.unpack_from("<H", e)[0])

    ifd_offset = 8 + len(data_area)
    if ifd_offset % 2:
        data_area.append(0)
        ifd_offset += 1
    ifd_size = 2 + 12 * len(entries) + 4
    # resolve out-of-line value pointers, placed after the IFD
    values_base = ifd_offset + ifd_size
    value_area = bytearray()
    resolved = []
    for entry in entries:
        ptr = struct.unpack_from("<I", entry, 8)[0]
        if ptr >> 16 == 0xEEEE:
            payload = out_of_line[ptr & 0xFFFF]
            entry = entry[:8] + struct.pack("<I", values_base + len(value_area))
            value_area.extend(payload)
            if len(value_area) % 2:
                value_area.append(0)
        resolved.append(entry)

    out = bytearray()
    out += b"II" + struct.pack("<H", 42) + struct.pack("<I", ifd_offset)
    out += data_area
    out += struct.pack("<H", len(resolved))
    for entry in resolved:
        out += entry
    out += struct.pack("<I", 0)  # no further IFDs
    out += value_area

    path = Path(path)
    path.write_bytes(bytes(out))
    return path
