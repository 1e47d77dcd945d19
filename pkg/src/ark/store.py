"""Content-addressed, immutable, deduplicated object store.

Objects live under ``objects/ab/cdef...`` (two-hex-char fanout) keyed by the
SHA-256 of their canonical uncompressed bytes.  Each object file carries a
one-byte storage envelope (0=raw, 1=deflate) in front of the payload; the
envelope is invisible to identity, so switching compression never changes a
hash.  Every read re-hashes the payload and fails loudly on mismatch.

``refs/<layer_name>`` holds the latest commit hash for a named layer as
text.  ``memo/<key>`` and ``prov/<output>`` are small index files pointing
back into the CAS.  The store is append-only: nothing is ever rewritten.
"""

from __future__ import annotations

import json
import os
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .canonical import canonical_json_bytes, is_hex_digest, sha256_hex
from .chunk import Chunk, canonical_chunk_bytes, chunk_from_bytes
from .difc import Label
from .errors import (
    ArkError,
    CorruptObjectError,
    GeometryError,
    MissingObjectError,
    ValidationError,
)
from .geo import Affine, Crs, TileGrid

_RAW = 0
_DEFLATE = 1


class ChunkStore:
    def __init__(self, root: str | os.PathLike, compression: str = "none"):
        if compression not in ("none", "deflate"):
            raise ArkError(f"unknown compression {compression!r}")
        self.root = Path(root)
        self.compression = compression
        for sub in ("objects", "refs", "memo", "prov", "runs"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)

    # -- raw objects --------------------------------------------------------

    def _object_path(self, ref: str) -> Path:
        return self.root / "objects" / ref[:2] / ref[2:]

    def put_bytes(self, data: bytes) -> str:
        ref = sha256_hex(data)
        path = self._object_path(ref)
        if path.exists():
            return ref
        path.parent.mkdir(parents=True, exist_ok=True)
        if self.compression == "deflate":
            body = bytes([_DEFLATE]) + zlib.compress(data, 6)
        else:
            body = bytes([_RAW]) + data
        # Concurrent writers race benignly: same content, atomic rename wins.
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(body)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        return ref

    def get_bytes(self, ref: str) -> bytes:
        if not is_hex_digest(ref):
            raise MissingObjectError(f"malformed object ref {ref!r}")
        path = self._object_path(ref)
        if not path.exists():
            raise MissingObjectError(f"object {ref} not in store")
        body = path.read_bytes()
        if not body:
            raise CorruptObjectError(f"object {ref} is empty on disk")
        if body[0] == _DEFLATE:
            data = zlib.decompress(body[1:])
        elif body[0] == _RAW:
            data = body[1:]
        else:
            raise CorruptObjectError(f"object {ref} has unknown envelope {body[0]}")
        if sha256_hex(data) != ref:
            raise CorruptObjectError(f"object {ref} failed hash verification")
        return data

    def has(self, ref: str) -> bool:
        return is_hex_digest(ref) and self._object_path(ref).exists()

    def iter_objects(self):
        objdir = self.root / "objects"
        for fan in sorted(objdir.iterdir()):
            if not fan.is_dir():
                continue
            for obj in sorted(fan.iterdir()):
                yield fan.name + obj.name

    # -- typed objects ------------------------------------------------------

    def put_chunk(self, chunk: Chunk) -> str:
        return self.put_bytes(canonical_chunk_bytes(chunk))

    def get_chunk(self, ref: str) -> Chunk:
        return chunk_from_bytes(self.get_bytes(ref))

    def put_obj(self, obj) -> str:
        return self.put_bytes(canonical_json_bytes(obj))

    def get_obj(self, ref: str):
        return json.loads(self.get_bytes(ref).decode("utf-8"))

    # -- named refs ---------------------------------------------------------

    def _ref_path(self, name: str) -> Path:
        if not name or "/" in name or name.startswith("."):
            raise ValidationError(f"bad layer name {name!r}")
        return self.root / "refs" / name

    def read_ref(self, name: str) -> Optional[str]:
        path = self._ref_path(name)
        if not path.exists():
            return None
        return path.read_text().strip()

    def write_ref(self, name: str, commit_hash: str):
        path = self._ref_path(name)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
        with os.fdopen(fd, "w") as f:
            f.write(commit_hash + "\n")
        os.replace(tmp, path)

    def list_refs(self) -> list[str]:
        return sorted(p.name for p in (self.root / "refs").iterdir() if p.is_file())

    # -- indexes ------------------------------------------------------------

    def memo_get(self, key: str) -> Optional[list[str]]:
        path = self.root / "memo" / key
        if not path.exists():
            return None
        return json.loads(path.read_text())

    def memo_put(self, key: str, output_refs: list[str]):
        path = self.root / "memo" / key
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
        with os.fdopen(fd, "w") as f:
            f.write(json.dumps(output_refs))
        os.replace(tmp, path)

    def prov_get(self, output_ref: str) -> Optional[str]:
        path = self.root / "prov" / output_ref
        if not path.exists():
            return None
        return path.read_text().strip()

    def prov_put(self, output_ref: str, prov_hash: str):
        path = self.root / "prov" / output_ref
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
        with os.fdopen(fd, "w") as f:
            f.write(prov_hash + "\n")
        os.replace(tmp, path)

    def run_put(self, run_id: str, record_hash: str):
        (self.root / "runs" / run_id).write_text(record_hash + "\n")

    def run_get(self, run_id: str) -> Optional[str]:
        path = self.root / "runs" / run_id
        if not path.exists():
            return None
        return path.read_text().strip()

    def list_runs(self) -> list[str]:
        return sorted(p.name for p in (self.root / "runs").iterdir() if p.is_file())


# -- layer versions ---------------------------------------------------------


@dataclass
class LayerVersion:
    """Merkle manifest over a layer's chunks plus georeferencing metadata."""

    layer_name: str
    crs: Crs
    affine: Affine
    width: int
    height: int
    dtype: str
    nodata: Optional[float]
    band_count: int
    time_stamp: Optional[str]
    label: Label
    chunk_map: dict[tuple[int, int, int], str] = field(default_factory=dict)

    @property
    def grid(self) -> TileGrid:
        return TileGrid(self.width, self.height)

    def expected_keys(self) -> set[tuple[int, int, int]]:
        return {
            (band, tx, ty)
            for band in range(1, self.band_count + 1)
            for (tx, ty) in self.grid.all_tiles()
        }

    def validate(self):
        if self.band_count < 1:
            raise ValidationError("band_count must be >= 1")
        if set(self.chunk_map) != self.expected_keys():
            raise ValidationError(
                f"chunk_map does not cover the {self.grid.tiles_x}x{self.grid.tiles_y}"
                f" grid x {self.band_count} band(s) of {self.layer_name!r}"
            )
        return self

    def manifest_obj(self) -> dict:
        return {
            "kind": "layer",
            "layer_name": self.layer_name,
            "crs": self.crs.epsg_code,
            "affine": self.affine.as_list(),
            "width": self.width,
            "height": self.height,
            "dtype": self.dtype,
            "nodata": self.nodata,
            "band_count": self.band_count,
            "time_stamp": self.time_stamp,
            "label": self.label.as_list(),
            "chunk_map": {
                f"{band}/{tx}/{ty}": ref
                for (band, tx, ty), ref in sorted(self.chunk_map.items())
            },
        }

    def manifest_bytes(self) -> bytes:
        return canonical_json_bytes(self.manifest_obj())

    @property
    def manifest_hash(self) -> str:
        return sha256_hex(self.manifest_bytes())

    @classmethod
    def from_manifest_obj(cls, obj: dict) -> "LayerVersion":
        if obj.get("kind") != "layer":
            raise ValidationError("object is not a layer manifest")
        chunk_map = {}
        for key, ref in obj["chunk_map"].items():
            band, tx, ty = key.split("/")
            chunk_map[(int(band), int(tx), int(ty))] = ref
        return cls(
            layer_name=obj["layer_name"],
            crs=Crs(obj["crs"]),
            affine=Affine.from_list(obj["affine"]),
            width=obj["width"],
            height=obj["height"],
            dtype=obj["dtype"],
            nodata=obj["nodata"],
            band_count=obj["band_count"],
            time_stamp=obj["time_stamp"],
            label=Label.from_list(obj["label"]),
            chunk_map=chunk_map,
        )

    def same_geometry(self, other: "LayerVersion") -> bool:
        return (
            self.crs == other.crs
            and self.affine == other.affine
            and self.width == other.width
            and self.height == other.height
            and self.band_count == other.band_count
        )


@dataclass
class Commit:
    parent: Optional[str]
    layer_versions: list[str]
    message: str
    created_at: str

    def obj(self) -> dict:
        return {
            "kind": "commit",
            "parent": self.parent,
            "layer_versions": sorted(self.layer_versions),
            "message": self.message,
            "created_at": self.created_at,
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "Commit":
        if obj.get("kind") != "commit":
            raise ValidationError("object is not a commit")
        return cls(obj["parent"], obj["layer_versions"], obj["message"], obj["created_at"])


def commit_layer(
    store: ChunkStore,
    version: LayerVersion,
    parent: Optional[str],
    message: str,
    created_at: str,
) -> tuple[str, str]:
    """Store the manifest and a commit pointing at it; returns (commit, manifest)."""
    version.validate()
    for key, ref in version.chunk_map.items():
        if not store.has(ref):
            raise MissingObjectError(f"dangling chunk ref {ref} at {key}")
    manifest_hash = store.put_bytes(version.manifest_bytes())
    if parent is not None and not store.has(parent):
        raise MissingObjectError(f"parent commit {parent} not in store")
    commit = Commit(parent, [manifest_hash], message, created_at)
    commit_hash = store.put_obj(commit.obj())
    store.write_ref(version.layer_name, commit_hash)
    return commit_hash, manifest_hash


def load_layer(store: ChunkStore, manifest_hash: str) -> LayerVersion:
    return LayerVersion.from_manifest_obj(store.get_obj(manifest_hash))


def resolve_latest(store: ChunkStore, layer_name: str) -> Optional[str]:
    """Latest manifest hash for a named layer, following its ref."""
    commit_hash = store.read_ref(layer_name)
    if commit_hash is None:
        return None
    commit = Commit.from_obj(store.get_obj(commit_hash))
    return commit.layer_versions[0]


def diff_versions(a: LayerVersion, b: LayerVersion) -> list[tuple[int, int, int]]:
    """(band, tx, ty) entries whose chunk refs differ between two versions."""
    if not a.same_geometry(b):
        raise GeometryError("diff requires identical layer geometry")
    keys = set(a.chunk_map) | set(b.chunk_map)
    return sorted(k for k in keys if a.chunk_map.get(k) != b.chunk_map.get(k))
