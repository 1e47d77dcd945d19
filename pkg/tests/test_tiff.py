import struct

import numpy as np
import pytest
from PIL import Image

from ark.errors import MetadataError, UnsupportedFormatError
from ark.geo import Affine
from ark.tiff import read_geotiff
from helpers import write_geotiff

AFFINE = (500000.0, 250000.0, 30.0, -30.0)


def _patch_entry(path, tag, new_tag=None, new_value=None):
    """Rewrite one IFD entry in a fixture file (tag id and/or inline value)."""
    data = bytearray(path.read_bytes())
    (ifd,) = struct.unpack_from("<I", data, 4)
    (n,) = struct.unpack_from("<H", data, ifd)
    for k in range(n):
        off = ifd + 2 + 12 * k
        (t,) = struct.unpack_from("<H", data, off)
        if t == tag:
            if new_tag is not None:
                struct.pack_into("<H", data, off, new_tag)
            if new_value is not None:
                struct.pack_into("<I", data, off + 8, new_value)
            path.write_bytes(bytes(data))
            return path
    raise AssertionError(f"tag {tag} not present in fixture")


@pytest.mark.parametrize(
    "npdt,name",
    [(np.uint8, "u8"), (np.int16, "i16"), (np.int32, "i32"), (np.float32, "f32")],
)
@pytest.mark.parametrize(
    "layout",
    [
        {},
        {"rows_per_strip": 7},
        {"tiled": True},
        {"compression": "deflate"},
        {"tiled": True, "compression": "deflate"},
        {"rows_per_strip": 1, "compression": "deflate"},
    ],
    ids=["one-strip", "strips", "tiles", "deflate", "tiled-deflate", "strip-rows"],
)
def test_values_match_pillow_and_source(tmp_path, rng, npdt, name, layout):
    if npdt is np.float32:
        vals = rng.normal(size=(37, 23)).astype(npdt)
    else:
        vals = rng.integers(-100 if name != "u8" else 0, 200, (37, 23)).astype(npdt)
    path = write_geotiff(tmp_path / "f.tif", vals, 3857, AFFINE, **layout)

    img = read_geotiff(path)
    assert img.dtype == name
    assert (img.width, img.height) == (23, 37)
    assert np.array_equal(img.values, vals)

    # independent decoder must agree cell for cell
    oracle = np.array(Image.open(path))
    assert np.array_equal(oracle.astype(np.float64), vals.astype(np.float64))


def test_georeferencing_parsed(tmp_path):
    vals = np.zeros((4, 6), dtype=np.uint8)
    path = write_geotiff(tmp_path / "g.tif", vals, 3857, AFFINE)
    img = read_geotiff(path)
    assert img.epsg == 3857
    assert img.affine == Affine(500000.0, 250000.0, 30.0, -30.0)
    assert img.crs().epsg_code == 3857


def test_geographic_crs_key(tmp_path):
    path = write_geotiff(
        tmp_path / "g.tif", np.zeros((3, 3), np.uint8), 4326, (10.0, 50.0, 0.5, -0.5)
    )
    img = read_geotiff(path)
    assert img.epsg == 4326
    assert img.affine == Affine(10.0, 50.0, 0.5, -0.5)


def test_nodata_tag(tmp_path):
    vals = np.full((5, 5), 3, dtype=np.int16)
    with_nd = write_geotiff(tmp_path / "a.tif", vals, 3857, AFFINE, nodata=-9999)
    without = write_geotiff(tmp_path / "b.tif", vals, 3857, AFFINE)
    assert read_geotiff(with_nd).nodata == -9999.0
    assert read_geotiff(without).nodata is None


def test_missing_georef_tags(tmp_path):
    path = write_geotiff(tmp_path / "g.tif", np.zeros((3, 3), np.uint8), 3857, AFFINE)
    _patch_entry(path, 33550, new_tag=50000)  # hide pixel scale
    img = read_geotiff(path)
    assert img.affine is None

    path2 = write_geotiff(tmp_path / "h.tif", np.zeros((3, 3), np.uint8), 3857, AFFINE)
    _patch_entry(path2, 34735, new_tag=50001)  # hide geokey directory
    img2 = read_geotiff(path2)
    assert img2.epsg is None
    with pytest.raises(MetadataError):
        img2.crs()


class TestRejects:
    def _fixture(self, tmp_path):
        return write_geotiff(
            tmp_path / "f.tif", np.zeros((8, 8), np.uint8), 3857, AFFINE
        )

    def test_big_endian(self, tmp_path):
        path = self._fixture(tmp_path)
        data = bytearray(path.read_bytes())
        data[:2] = b"MM"
        path.write_bytes(bytes(data))
        with pytest.raises(UnsupportedFormatError, match="big-endian"):
            read_geotiff(path)

    def test_bigtiff(self, tmp_path):
        path = self._fixture(tmp_path)
        data = bytearray(path.read_bytes())
        struct.pack_into("<H", data, 2, 43)
        path.write_bytes(bytes(data))
        with pytest.raises(UnsupportedFormatError, match="BigTIFF"):
            read_geotiff(path)

    def test_not_a_tiff(self, tmp_path):
        path = tmp_path / "x.tif"
        path.write_bytes(b"\x89PNG\r\n\x1a\n" + b"\x00" * 16)
        with pytest.raises(UnsupportedFormatError):
            read_geotiff(path)
        path.write_bytes(b"II")
        with pytest.raises(UnsupportedFormatError):
            read_geotiff(path)

    def test_multi_band(self, tmp_path):
        path = self._fixture(tmp_path)
        _patch_entry(path, 277, new_value=2)
        with pytest.raises(UnsupportedFormatError, match="single-band"):
            read_geotiff(path)

    def test_predictor(self, tmp_path):
        path = self._fixture(tmp_path)
        # repurpose the sample-format entry as a horizontal-differencing flag
        _patch_entry(path, 339, new_tag=317, new_value=2)
        with pytest.raises(UnsupportedFormatError, match="predictor"):
            read_geotiff(path)

    def test_lzw_compression(self, tmp_path):
        path = self._fixture(tmp_path)
        _patch_entry(path, 259, new_value=5)
        with pytest.raises(UnsupportedFormatError, match="compression"):
            read_geotiff(path)

    def test_unsupported_pixel_type(self, tmp_path):
        path = self._fixture(tmp_path)
        _patch_entry(path, 258, new_value=64)
        with pytest.raises(UnsupportedFormatError, match="pixel type"):
            read_geotiff(path)

    def test_truncated_strip_data(self, tmp_path):
        path = self._fixture(tmp_path)
        _patch_entry(path, 279, new_value=3)  # strip byte count lies
        with pytest.raises(UnsupportedFormatError, match="wrong decoded size"):
            read_geotiff(path)
