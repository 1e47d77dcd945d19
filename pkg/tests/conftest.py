import os
import sys
from pathlib import Path

import numpy as np
import pytest

# Deterministic wall clock for everything that stamps commits or checks
# embargoes; individual tests override via the `clock` fixture.
os.environ.setdefault("ARK_CLOCK", "2026-03-01T00:00:00Z")

sys.path.insert(0, str(Path(__file__).parent))

from ark.difc import Label
from ark.geo import Affine, Crs
from ark.ingest import ingest_prov, write_layer_version
from ark.store import ChunkStore, commit_layer


@pytest.fixture
def store(tmp_path):
    return ChunkStore(tmp_path / "data")


@pytest.fixture
def clock(monkeypatch):
    """Set the fake clock for one test: clock('2026-06-01T00:00:00Z')."""

    def set_to(instant: str):
        monkeypatch.setenv("ARK_CLOCK", instant)

    return set_to


@pytest.fixture
def rng():
    return np.random.default_rng(20260301)


@pytest.fixture
def make_layer(store):
    """Commit a raster layer version from an array; returns (commit, manifest, version)."""

    def make(
        name,
        values,
        dtype=None,
        nodata=None,
        label=(),
        epsg=3857,
        affine=None,
        time_stamp=None,
        message="ingest",
        source="test://fixture",
    ):
        values = np.asarray(values)
        if dtype is None:
            dtype = {"uint8": "u8", "int16": "i16", "int32": "i32",
                     "float32": "f32", "float64": "f64"}[values.dtype.name]
        if affine is None:
            affine = Affine(0.0, float(values.shape[0]), 1.0, -1.0)
        version = write_layer_version(
            store, name, values, dtype, Crs(epsg), affine, nodata,
            Label.from_list(list(label)), time_stamp,
        )
        parent = store.read_ref(name)
        commit_hash, manifest_hash = commit_layer(
            store, version, parent, message, "2026-03-01T00:00:00Z"
        )
        ingest_prov(store, version, source)
        return commit_hash, manifest_hash, version

    return make
