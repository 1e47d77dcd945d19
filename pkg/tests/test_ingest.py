import json

import numpy as np
import pytest

from ark.chunk import chunk_from_bytes
from ark.difc import Label
from ark.errors import GeometryError, MetadataError, ParseError
from ark.geo import Affine, Crs
from ark.ingest import (
    PointSet,
    PolygonSet,
    import_geojson_polygons,
    import_geotiff,
    import_points_csv,
    read_layer_array,
    ring_area,
    write_layer_version,
)
from helpers import write_geotiff

AFFINE = (100.0, 4000.0, 10.0, -10.0)


class TestRasterRoundTrip:
    def test_array_survives_tiling(self, store, rng):
        vals = rng.integers(0, 200, (1500, 1100)).astype(np.uint8)
        version = write_layer_version(
            store, "lulc", vals, "u8", Crs(3857),
            Affine(0, 1500, 1, -1), None, Label.bottom(),
        )
        assert np.array_equal(read_layer_array(store, version), vals)

    def test_edge_tiles_padded_with_nodata(self, store):
        vals = np.ones((1030, 1030), dtype=np.float32)
        version = write_layer_version(
            store, "t", vals, "f32", Crs(3857),
            Affine(0, 1030, 1, -1), -5.0, Label.bottom(),
        )
        corner = store.get_chunk(version.chunk_map[(1, 1, 1)])
        assert corner.width == corner.height == 1024
        assert (corner.values[:6, :6] == 1.0).all()
        assert (corner.values[6:, :] == -5.0).all()
        assert (corner.values[:, 6:] == -5.0).all()

    def test_edge_tiles_padded_with_zero_when_no_nodata(self, store):
        vals = np.ones((10, 1030), dtype=np.uint8)
        version = write_layer_version(
            store, "t", vals, "u8", Crs(3857),
            Affine(0, 10, 1, -1), None, Label.bottom(),
        )
        east = store.get_chunk(version.chunk_map[(1, 1, 0)])
        assert (east.values[:10, :6] == 1).all()
        assert (east.values[:10, 6:] == 0).all()
        assert (east.values[10:, :] == 0).all()

    def test_identical_content_same_manifest(self, store, rng):
        vals = rng.integers(0, 9, (64, 64)).astype(np.uint8)
        kw = dict(dtype="u8", crs=Crs(3857), affine=Affine(0, 64, 1, -1),
                  nodata=None, label=Label.bottom())
        v1 = write_layer_version(store, "a", vals, kw["dtype"], kw["crs"],
                                 kw["affine"], kw["nodata"], kw["label"])
        v2 = write_layer_version(store, "a", vals.copy(), kw["dtype"], kw["crs"],
                                 kw["affine"], kw["nodata"], kw["label"])
        assert v1.manifest_hash == v2.manifest_hash


class TestGeotiffImport:
    def test_import_commits_and_reads_back(self, store, tmp_path, rng):
        vals = rng.integers(0, 150, (40, 56)).astype(np.uint8)
        path = write_geotiff(tmp_path / "in.tif", vals, 3857, AFFINE, nodata=0)
        info = import_geotiff(store, "lulc", path, Label.of("s1"))
        assert info["layer"] == "lulc"
        assert (info["width"], info["height"]) == (56, 40)
        assert info["tiles"] == 1
        from ark.store import load_layer, resolve_latest

        version = load_layer(store, resolve_latest(store, "lulc"))
        assert version.label.as_list() == ["s1"]
        assert version.nodata == 0.0
        assert version.affine == Affine(*AFFINE)
        assert np.array_equal(read_layer_array(store, version), vals)

    def test_import_is_deterministic(self, store, tmp_path, rng):
        vals = rng.integers(0, 150, (12, 12)).astype(np.int16)
        p1 = write_geotiff(tmp_path / "a.tif", vals, 3857, AFFINE)
        p2 = write_geotiff(tmp_path / "b.tif", vals, 3857, AFFINE)
        i1 = import_geotiff(store, "x", p1, Label.bottom())
        i2 = import_geotiff(store, "y", p2, Label.bottom())
        # same pixels, same geometry: identical chunks; manifests differ
        # only by layer name
        from ark.store import load_layer

        va = load_layer(store, i1["manifest"])
        vb = load_layer(store, i2["manifest"])
        assert set(va.chunk_map.values()) == set(vb.chunk_map.values())

    def test_reimport_same_layer_chains_commits(self, store, tmp_path, rng):
        vals = rng.integers(0, 9, (8, 8)).astype(np.uint8)
        path = write_geotiff(tmp_path / "a.tif", vals, 3857, AFFINE)
        i1 = import_geotiff(store, "x", path, Label.bottom())
        i2 = import_geotiff(store, "x", path, Label.bottom())
        assert i1["manifest"] == i2["manifest"]
        assert i1["commit"] != i2["commit"]
        assert store.get_obj(i2["commit"])["parent"] == i1["commit"]

    def test_missing_georef_rejected(self, store, tmp_path):
        path = write_geotiff(tmp_path / "g.tif", np.zeros((3, 3), np.uint8), 3857, AFFINE)
        import struct as _s

        data = bytearray(path.read_bytes())
        (ifd,) = _s.unpack_from("<I", data, 4)
        (n,) = _s.unpack_from("<H", data, ifd)
        for k in range(n):
            off = ifd + 2 + 12 * k
            if _s.unpack_from("<H", data, off)[0] == 33550:
                _s.pack_into("<H", data, off, 50000)
        path.write_bytes(bytes(data))
        with pytest.raises(MetadataError):
            import_geotiff(store, "g", path, Label.bottom())

    def test_prov_leaf_written_for_every_chunk(self, store, tmp_path, rng):
        vals = rng.integers(0, 9, (1100, 2060)).astype(np.uint8)
        path = write_geotiff(tmp_path / "a.tif", vals, 3857, AFFINE)
        info = import_geotiff(store, "x", path, Label.of("s1"))
        from ark.store import load_layer

        version = load_layer(store, info["manifest"])
        prov_hash = store.prov_get(info["manifest"])
        assert prov_hash is not None
        node = store.get_obj(prov_hash)
        assert node["op"] == "ingest" and node["label"] == ["s1"]
        for ref in version.chunk_map.values():
            assert store.prov_get(ref) == prov_hash


def _write_csv(path, rows, header="lon,lat,time,value,category"):
    path.write_text(header + "\n" + "\n".join(rows) + ("\n" if rows else ""))
    return path


class TestPointsCsv:
    def test_good_file(self, store, tmp_path):
        path = _write_csv(tmp_path / "p.csv", [
            "13.4,52.5,2026-01-05T12:00:00Z,4.25,oak",
            "-0.1,51.5,2026-01-06T00:30:00Z,1.5,elm",
            "",  # blank lines are skipped
        ])
        ref, points = import_points_csv(store, path, Label.of("survey"))
        assert len(points) == 2
        assert points.lons.tolist() == [13.4, -0.1]
        assert points.categories == ["oak", "elm"]
        back = PointSet.from_obj(store.get_obj(ref))
        assert back.times == points.times
        assert back.label == Label.of("survey")
        assert store.prov_get(ref) is not None

    def test_time_text_is_normalized(self, store, tmp_path):
        path = _write_csv(tmp_path / "p.csv", [
            "0,0,2026-01-05T12:00:00+00:00,1,a",
        ])
        _, points = import_points_csv(store, path, Label.bottom())
        assert points.times == ["2026-01-05T12:00:00Z"]

    def test_all_errors_reported_with_line_numbers(self, store, tmp_path):
        path = _write_csv(tmp_path / "p.csv", [
            "13.4,52.5,2026-01-05T12:00:00Z,4.25,oak",
            "181,52.5,2026-01-05T12:00:00Z,1,b",
            "x,52.5,2026-01-05T12:00:00Z,1,c",
            "1,2,not-a-time,1,d",
            "1,2,2026-01-05T12:00:00Z,NOPE,e",
            "1,2,2026-01-05T12:00:00Z,1",
        ])
        with pytest.raises(ParseError) as exc:
            import_points_csv(store, path, Label.bottom())
        msg = str(exc.value)
        assert "line 3" in msg and "out of range" in msg
        assert "line 4" in msg and "unparseable coordinate" in msg
        assert "line 5" in msg
        assert "line 6" in msg
        assert "line 7" in msg and "expected 5 fields" in msg
        assert "line 2" not in msg

    def test_error_list_truncated_after_five(self, store, tmp_path):
        rows = [f"x{i},0,2026-01-01T00:00:00Z,1,a" for i in range(8)]
        with pytest.raises(ParseError) as exc:
            import_points_csv(store, _write_csv(tmp_path / "p.csv", rows),
                              Label.bottom())
        assert "(+3 more)" in str(exc.value)

    def test_wrong_header_rejected(self, store, tmp_path):
        path = _write_csv(tmp_path / "p.csv", ["1,2,3,4,5"], header="a,b,c,d,e")
        with pytest.raises(ParseError, match="header"):
            import_points_csv(store, path, Label.bottom())

    def test_empty_file_rejected(self, store, tmp_path):
        path = tmp_path / "p.csv"
        path.write_text("")
        with pytest.raises(ParseError, match="empty"):
            import_points_csv(store, path, Label.bottom())

    def test_import_is_content_addressed(self, store, tmp_path):
        rows = ["1,2,2026-01-01T00:00:00Z,3,a"]
        r1, _ = import_points_csv(store, _write_csv(tmp_path / "a.csv", rows),
                                  Label.bottom())
        r2, _ = import_points_csv(store, _write_csv(tmp_path / "b.csv", rows),
                                  Label.bottom())
        assert r1 == r2


def _feature_collection(*geometries):
    return {
        "type": "FeatureCollection",
        "features": [
            {"type": "Feature", "properties": {}, "geometry": g} for g in geometries
        ],
    }


def _write_geojson(path, doc):
    path.write_text(json.dumps(doc))
    return path


SQUARE_CCW = [[0.0, 0.0], [4.0, 0.0], [4.0, 4.0], [0.0, 4.0], [0.0, 0.0]]
SQUARE_CW = SQUARE_CCW[::-1]
HOLE_CCW = [[1.0, 1.0], [2.0, 1.0], [2.0, 2.0], [1.0, 2.0], [1.0, 1.0]]


class TestGeojsonPolygons:
    def test_orientation_normalized(self, store, tmp_path):
        # shell given clockwise, hole counter-clockwise: both get flipped
        doc = _feature_collection(
            {"type": "Polygon", "coordinates": [SQUARE_CW, HOLE_CCW]}
        )
        ref, pset = import_geojson_polygons(
            store, _write_geojson(tmp_path / "p.json", doc), Label.bottom()
        )
        assert len(pset) == 1
        shell, hole = pset.polygons[0]
        assert ring_area(shell) > 0
        assert ring_area(hole) < 0
        assert len(shell) == 4  # closing vertex dropped

    def test_reversed_ring_keeps_its_geometry(self, store, tmp_path):
        d1 = _feature_collection({"type": "Polygon", "coordinates": [SQUARE_CCW]})
        d2 = _feature_collection({"type": "Polygon", "coordinates": [SQUARE_CW]})
        _, p1 = import_geojson_polygons(
            store, _write_geojson(tmp_path / "a.json", d1), Label.bottom())
        _, p2 = import_geojson_polygons(
            store, _write_geojson(tmp_path / "b.json", d2), Label.bottom())
        a, b = p1.polygons[0][0], p2.polygons[0][0]
        assert ring_area(a) == ring_area(b) > 0
        assert {tuple(v) for v in a} == {tuple(v) for v in b}

    def test_identical_files_share_one_ref(self, store, tmp_path):
        doc = _feature_collection({"type": "Polygon", "coordinates": [SQUARE_CCW]})
        r1, _ = import_geojson_polygons(
            store, _write_geojson(tmp_path / "a.json", doc), Label.bottom())
        r2, _ = import_geojson_polygons(
            store, _write_geojson(tmp_path / "b.json", doc), Label.bottom())
        assert r1 == r2

    def test_multipolygon_flattened(self, store, tmp_path):
        shifted = [[x + 10, y] for x, y in SQUARE_CCW]
        doc = _feature_collection(
            {"type": "MultiPolygon", "coordinates": [[SQUARE_CCW], [shifted]]}
        )
        _, pset = import_geojson_polygons(
            store, _write_geojson(tmp_path / "m.json", doc), Label.bottom())
        assert len(pset) == 2

    def test_round_trip_through_store(self, store, tmp_path):
        doc = _feature_collection(
            {"type": "Polygon", "coordinates": [SQUARE_CCW, HOLE_CCW]}
        )
        ref, pset = import_geojson_polygons(
            store, _write_geojson(tmp_path / "p.json", doc), Label.of("zones"))
        back = PolygonSet.from_obj(store.get_obj(ref))
        assert len(back) == len(pset)
        assert np.array_equal(back.polygons[0][0], pset.polygons[0][0])
        assert back.label == Label.of("zones")

    def test_unclosed_ring_rejected(self, store, tmp_path):
        doc = _feature_collection(
            {"type": "Polygon", "coordinates": [SQUARE_CCW[:-1]]}
        )
        with pytest.raises(GeometryError, match="unclosed"):
            import_geojson_polygons(
                store, _write_geojson(tmp_path / "p.json", doc), Label.bottom())

    def test_unsupported_geometry_rejected(self, store, tmp_path):
        doc = _feature_collection({"type": "Point", "coordinates": [1.0, 2.0]})
        with pytest.raises(GeometryError, match="unsupported geometry"):
            import_geojson_polygons(
                store, _write_geojson(tmp_path / "p.json", doc), Label.bottom())

    def test_non_collection_rejected(self, store, tmp_path):
        with pytest.raises(GeometryError, match="FeatureCollection"):
            import_geojson_polygons(
                store,
                _write_geojson(tmp_path / "p.json",
                               {"type": "Polygon", "coordinates": [SQUARE_CCW]}),
                Label.bottom(),
            )
