"""Raster file I/O.

The canonical on-disk container is HMAP, a tiny bit-exact format: magic
``HMAP``, little-endian u32 width, u32 height, u32 channels, f32 gsd_m, one
dtype tag byte (0 = float32 grid, 1 = uint16 labels), then the row-major
payload. PNG and TIFF adapters convert to and from HMAP-backed grids at the
boundary; georeferencing tags are not interpreted, the ground-sample
distance always comes from the caller or the dataset manifest.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .raster import LabelGrid, RasterGrid

HMAP_MAGIC = b"HMAP"
_HEADER = struct.Struct("<4sIIIfB")
_DTYPE_F32 = 0
_DTYPE_U16_LABELS = 1


def write_hmap(path: str | Path, grid: RasterGrid | LabelGrid) -> None:
    path = Path(path)
    if isinstance(grid, RasterGrid):
        tag = _DTYPE_F32
        payload = np.ascontiguousarray(grid.data, dtype="<f4").tobytes()
        channels = grid.channels
    elif isinstance(grid, LabelGrid):
        tag = _DTYPE_U16_LABELS
        if grid.labels.max(initial=0) > np.iinfo(np.uint16).max:
            raise ValueError("labels exceed uint16 range")
        payload = np.ascontiguousarray(grid.labels, dtype="<u2").tobytes()
        channels = 1
    else:
        raise TypeError(f"cannot serialize {type(grid).__name__}")
    header = _HEADER.pack(
        HMAP_MAGIC, grid.width_px, grid.height_px, channels, grid.gsd_m, tag
    )
    path.write_bytes(header + payload)


def read_hmap(path: str | Path, num_classes: int | None = None) -> RasterGrid | LabelGrid:
    """Load an HMAP container.

    For label payloads ``num_classes`` may be supplied; otherwise it is
    inferred as max label + 1 (floored at 2).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such raster file: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size or raw[:4] != HMAP_MAGIC:
        raise ValueError(f"not an HMAP file: {path}")
    magic, width, height, channels, gsd, tag = _HEADER.unpack_from(raw)
    body = raw[_HEADER.size :]
    if tag == _DTYPE_F32:
        expected = height * width * channels * 4
        if len(body) != expected:
            raise ValueError(f"truncated HMAP payload in {path}")
        data = np.frombuffer(body, dtype="<f4").reshape(height, width, channels)
        return RasterGrid(data.copy(), gsd)
    if tag == _DTYPE_U16_LABELS:
        expected = height * width * 2
        if len(body) != expected:
            raise ValueError(f"truncated HMAP payload in {path}")
        labels = np.frombuffer(body, dtype="<u2").reshape(height, width).astype(np.int32)
        if num_classes is None:
            num_classes = max(int(labels.max(initial=0)) + 1, 2)
        return LabelGrid(labels, num_classes, gsd)
    raise ValueError(f"unknown HMAP dtype tag {tag} in {path}")


def read_image(path: str | Path, gsd_m: float = 1.0) -> RasterGrid:
    """Read a raster from HMAP, PNG, or TIFF into a float grid.

    8-bit images are scaled to [0, 1]; float TIFFs are taken as-is.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such raster file: {path}")
    suffix = path.suffix.lower()
    if suffix == ".hmap":
        grid = read_hmap(path)
        if not isinstance(grid, RasterGrid):
            raise ValueError(f"{path} holds labels, not a float raster")
        return grid
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        data = arr.astype(np.float32) / 255.0
    elif arr.dtype == np.uint16:
        data = arr.astype(np.float32) / 65535.0
    else:
        data = arr.astype(np.float32)
    if data.ndim == 3 and data.shape[2] == 4:
        data = data[:, :, :3]
    return RasterGrid(data, gsd_m)


def read_labels(path: str | Path, num_classes: int, gsd_m: float = 1.0) -> LabelGrid:
    """Read class indices from HMAP or an 8/16-bit single-band image."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such label file: {path}")
    if path.suffix.lower() == ".hmap":
        grid = read_hmap(path, num_classes=num_classes)
        if not isinstance(grid, LabelGrid):
            raise ValueError(f"{path} holds a float raster, not labels")
        if grid.num_classes != num_classes:
            grid = LabelGrid(grid.labels, num_classes, grid.gsd_m)
        return grid
    arr = np.asarray(Image.open(path))
    if arr.ndim != 2:
        raise ValueError(f"label image must be single-band, got shape {arr.shape}")
    return LabelGrid(arr.astype(np.int32), num_classes, gsd_m)


def write_png(path: str | Path, grid: RasterGrid) -> None:
    """Write a [0, 1] float grid as an 8-bit PNG (1 or 3 channels)."""
    data = np.clip(grid.data, 0.0, 1.0)
    arr = np.round(data * 255.0).astype(np.uint8)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    elif arr.shape[2] != 3:
        raise ValueError(f"PNG export supports 1 or 3 channels, got {arr.shape[2]}")
    Image.fromarray(arr).save(Path(path))


def write_normalized_png(path: str | Path, grid: RasterGrid, channel: int = 0) -> None:
    """Min-max normalize one channel to 8 bits for visual inspection."""
    plane = grid.data[:, :, channel].astype(np.float64)
    lo, hi = plane.min(), plane.max()
    if hi > lo:
        plane = (plane - lo) / (hi - lo)
    else:
        plane = np.zeros_like(plane)
    Image.fromarray(np.round(plane * 255.0).astype(np.uint8)).save(Path(path))


def write_tiff(path: str | Path, grid: RasterGrid) -> None:
    """Write a float32 TIFF (single channel) or 8-bit RGB TIFF."""
    if grid.channels == 1:
        Image.fromarray(grid.data[:, :, 0], mode="F").save(Path(path))
    elif grid.channels == 3:
        arr = np.round(np.clip(grid.data, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(arr).save(Path(path))
    else:
        raise ValueError(f"TIFF export supports 1 or 3 channels, got {grid.channels}")
