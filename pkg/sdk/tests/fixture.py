"""Builds the on-disk world the SDK tests run against.

Usage: python3 fixture.py <root>

Creates two independent data directories seeded with the same GeoTIFF (one
behind the service, one for command-line runs), a principal registry, a
pipeline document, and a verification bundle exported from the command-line
run of that document.  Everything the tests need to know is printed as one
JSON object on stdout.

The TIFF writer below is deliberately minimal scaffolding: classic
little-endian, single band, one strip, uncompressed.
"""

from __future__ import annotations

import json
import struct
import subprocess
import sys
from pathlib import Path

import numpy as np

SHORT, LONG, DOUBLE, ASCII = 3, 4, 12, 2


def _entry(tag, typ, values, out_of_line):
    if typ == ASCII:
        payload = values
        count = len(payload)
    else:
        fmt = {SHORT: "H", LONG: "I", DOUBLE: "d"}[typ]
        count = len(values)
        payload = struct.pack(f"<{count}{fmt}", *values)
    if len(payload) <= 4:
        return struct.pack("<HHI", tag, typ, count) + payload.ljust(4, b"\x00")
    slot = len(out_of_line)
    out_of_line.append(payload)
    return struct.pack("<HHI", tag, typ, count) + struct.pack("<I", 0xEEEE0000 + slot)


def write_u8_geotiff(path: Path, values: np.ndarray, epsg: int, affine) -> None:
    values = np.ascontiguousarray(values, dtype=np.uint8)
    height, width = values.shape
    strip = values.tobytes()
    data_area = bytearray(strip)
    if len(data_area) % 2:
        data_area.append(0)
    strip_offset = 8

    origin_x, origin_y, pixel_w, pixel_h = affine
    geo_key = 2048 if epsg == 4326 else 3072
    out_of_line: list[bytes] = []
    entries = [
        _entry(256, LONG, [width], out_of_line),
        _entry(257, LONG, [height], out_of_line),
        _entry(258, SHORT, [8], out_of_line),
        _entry(259, SHORT, [1], out_of_line),
        _entry(262, SHORT, [1], out_of_line),
        _entry(273, LONG, [strip_offset], out_of_line),
        _entry(277, SHORT, [1], out_of_line),
        _entry(278, LONG, [height], out_of_line),
        _entry(279, LONG, [len(strip)], out_of_line),
        _entry(339, SHORT, [1], out_of_line),
        _entry(33550, DOUBLE, [pixel_w, -pixel_h, 0.0], out_of_line),
        _entry(33922, DOUBLE, [0.0, 0.0, 0.0, origin_x, origin_y, 0.0], out_of_line),
        _entry(34735, SHORT, [1, 1, 0, 1, geo_key, 0, 1, epsg], out_of_line),
    ]
    entries.sort(key=lambda e: struct.unpack_from("<H", e)[0])

    ifd_offset = 8 + len(data_area)
    ifd_size = 2 + 12 * len(entries) + 4
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

    with open(path, "wb") as f:
        f.write(b"II*\x00" + struct.pack("<I", ifd_offset))
        f.write(data_area)
        f.write(struct.pack("<H", len(resolved)))
        for entry in resolved:
            f.write(entry)
        f.write(struct.pack("<I", 0))
        f.write(value_area)


def ark(data_dir: Path, *args: str) -> list[dict]:
    proc = subprocess.run(
        ["ark", "--data-dir", str(data_dir), "--json", *args],
        capture_output=True,
        text=True,
    )
    if proc.returncode != 0:
        raise RuntimeError(f"ark {' '.join(args)} failed: {proc.stderr}")
    return [json.loads(line) for line in proc.stdout.splitlines() if line.strip()]


def build_registry(registry_dir: Path) -> None:
    from ark.difc import Label, Principal, Registry, Tag

    reg = Registry.empty()
    reg.add_tag(Tag("s1", created_at="2026-01-01T00:00:00Z"))
    reg.add_principal(
        Principal("alice", "tok-alice", Label.from_list(["s1"]), frozenset())
    )
    reg.add_principal(Principal("bob", "tok-bob", Label.from_list([]), frozenset()))
    reg.save(registry_dir)


def main() -> None:
    root = Path(sys.argv[1])
    root.mkdir(parents=True, exist_ok=True)
    serve_data = root / "serve-data"
    cli_data = root / "cli-data"
    registry = root / "registry"
    bundle = root / "bundle"

    rows = np.arange(64).reshape(-1, 1)
    cols = np.arange(96).reshape(1, -1)
    lulc = ((3 * rows + 5 * cols + (rows * cols) % 7) % 251).astype(np.uint8)
    tif = root / "lulc.tif"
    write_u8_geotiff(tif, lulc, epsg=3857, affine=(0.0, 64.0, 1.0, -1.0))

    patrol = ((rows[:32] * 7 + cols[:, :32] * 11) % 200).astype(np.uint8)
    patrol_tif = root / "patrol.tif"
    write_u8_geotiff(patrol_tif, patrol, epsg=3857, affine=(0.0, 32.0, 1.0, -1.0))

    ingest_args = (
        "ingest", "--kind", "geotiff", "--layer", "lulc", "--file", str(tif),
        "--time", "2026-01-01T00:00:00Z", "--message", "fixture",
    )
    serve_ingest = ark(serve_data, *ingest_args)[0]
    cli_ingest = ark(cli_data, *ingest_args)[0]
    if serve_ingest["manifest"] != cli_ingest["manifest"]:
        raise RuntimeError("same bytes ingested into two stores disagree on manifest")

    secret_ingest = ark(
        serve_data,
        "ingest", "--kind", "geotiff", "--layer", "patrol",
        "--file", str(patrol_tif), "--label", "s1",
        "--time", "2026-01-02T00:00:00Z", "--message", "restricted fixture",
    )[0]

    build_registry(registry)

    doc = {
        "name": "veg",
        "inputs": {"L": {"layer": "lulc", "version": "latest"}},
        "nodes": [
            {
                "id": "scaled",
                "op": "expr",
                "params": {"expr": "min(L.b1 * 3, 255)"},
                "inputs": {"L": "L"},
            },
            {
                "id": "hot",
                "op": "expr",
                "params": {"expr": "ifelse(scaled.b1 > 128, 1, 0)"},
                "inputs": {"scaled": "scaled"},
            },
        ],
        "outputs": ["scaled", "hot"],
    }
    doc_path = root / "pipeline.json"
    doc_path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")

    run_lines = ark(cli_data, "run", str(doc_path), "--workers", "2")
    summary = run_lines[0]
    cli_outputs = {line["node"]: line["refs"] for line in run_lines[1:]}

    ark(cli_data, "export", "--run", summary["run_id"], "--out", str(bundle))

    report = {
        "tif": str(tif),
        "serve_data": str(serve_data),
        "cli_data": str(cli_data),
        "registry": str(registry),
        "bundle": str(bundle),
        "doc": doc,
        "cli": {
            "run_id": summary["run_id"],
            "executed": summary["executed"],
            "outputs": cli_outputs,
        },
        "layer": {
            "name": "lulc",
            "manifest": serve_ingest["manifest"],
            "commit": serve_ingest["commit"],
            "width": 96,
            "height": 64,
            "dtype": "u8",
        },
        "secret": {"name": "patrol", "manifest": secret_ingest["manifest"]},
        "tokens": {"alice": "tok-alice", "bob": "tok-bob"},
    }
    print(json.dumps(report))


if __name__ == "__main__":
    main()
