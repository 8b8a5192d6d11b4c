import struct

import numpy as np
import pytest
from PIL import Image

from aeroheight import io
from aeroheight.raster import LabelGrid, RasterGrid


def test_hmap_float_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    grid = RasterGrid(rng.uniform(0, 30, size=(7, 5, 3)).astype(np.float32), 0.5)
    path = tmp_path / "t.hmap"
    io.write_hmap(path, grid)
    back = io.read_hmap(path)
    assert isinstance(back, RasterGrid)
    assert np.array_equal(back.data, grid.data)
    assert back.gsd_m == pytest.approx(0.5)


def test_hmap_header_layout(tmp_path):
    grid = RasterGrid(np.zeros((2, 3, 1), dtype=np.float32), 2.0)
    path = tmp_path / "t.hmap"
    io.write_hmap(path, grid)
    raw = path.read_bytes()
    magic, width, height, channels, gsd, tag = struct.unpack_from("<4sIIIfB", raw)
    assert magic == b"HMAP"
    assert (width, height, channels) == (3, 2, 1)
    assert gsd == pytest.approx(2.0)
    assert tag == 0
    assert len(raw) == struct.calcsize("<4sIIIfB") + 2 * 3 * 4


def test_hmap_label_roundtrip(tmp_path):
    labels = LabelGrid(np.array([[0, 1, 2], [5, 4, 3]]), num_classes=6, gsd_m=1.5)
    path = tmp_path / "l.hmap"
    io.write_hmap(path, labels)
    back = io.read_hmap(path, num_classes=6)
    assert isinstance(back, LabelGrid)
    assert np.array_equal(back.labels, labels.labels)
    assert back.num_classes == 6
    # inferred class count falls back to max+1
    inferred = io.read_hmap(path)
    assert inferred.num_classes == 6


def test_hmap_write_is_deterministic(tmp_path):
    grid = RasterGrid(np.arange(12, dtype=np.float32).reshape(3, 4, 1), 1.0)
    a, b = tmp_path / "a.hmap", tmp_path / "b.hmap"
    io.write_hmap(a, grid)
    io.write_hmap(b, grid)
    assert a.read_bytes() == b.read_bytes()


def test_read_hmap_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.hmap"):
        io.read_hmap(tmp_path / "nope.hmap")


def test_read_hmap_bad_magic(tmp_path):
    path = tmp_path / "bad.hmap"
    path.write_bytes(b"JUNKxxxxxxxxxxxxxxxxxxxx")
    with pytest.raises(ValueError, match="not an HMAP"):
        io.read_hmap(path)


def test_png_adapter_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    arr = (rng.uniform(size=(6, 8, 3)) * 255).astype(np.uint8)
    grid = RasterGrid(arr.astype(np.float32) / 255.0, 1.0)
    path = tmp_path / "x.png"
    io.write_png(path, grid)
    back = io.read_image(path)
    assert back.shape_px == (6, 8)
    assert np.allclose(back.data, grid.data, atol=1 / 255)


def test_tiff_float_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    grid = RasterGrid(rng.uniform(0, 30, size=(5, 4)).astype(np.float32), 1.0)
    path = tmp_path / "h.tif"
    io.write_tiff(path, grid)
    back = io.read_image(path, gsd_m=0.5)
    assert np.allclose(back.data[:, :, 0], grid.data[:, :, 0], atol=1e-6)
    assert back.gsd_m == pytest.approx(0.5)


def test_labels_from_png(tmp_path):
    labels = np.array([[0, 1], [2, 3]], dtype=np.uint8)
    path = tmp_path / "l.png"
    Image.fromarray(labels).save(path)
    back = io.read_labels(path, num_classes=4)
    assert np.array_equal(back.labels, labels)


def test_normalized_png_range(tmp_path):
    grid = RasterGrid(np.array([[0.0, 5.0], [10.0, 2.5]], dtype=np.float32), 1.0)
    path = tmp_path / "u.png"
    io.write_normalized_png(path, grid)
    arr = np.asarray(Image.open(path))
    assert arr.min() == 0 and arr.max() == 255
