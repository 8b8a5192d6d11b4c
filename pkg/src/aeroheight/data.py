"""Scene tiles, crop sampling, and dataset directory handling."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import io
from .raster import (
    DEFAULT_NORMAL_ENCODING,
    LabelGrid,
    NormalEncoding,
    RasterGrid,
    downsample,
    surface_normals,
)

MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class SceneTile:
    """Aligned RGB, ground-truth height (m), labels, and encoded normals."""

    rgb: RasterGrid
    height_gt: RasterGrid
    labels_gt: LabelGrid
    normals_gt: RasterGrid
    tile_id: str

    def __post_init__(self):
        shape = self.rgb.shape_px
        for name, grid in (
            ("height_gt", self.height_gt),
            ("labels_gt", self.labels_gt),
            ("normals_gt", self.normals_gt),
        ):
            if grid.shape_px != shape:
                raise ValueError(
                    f"{name} shape {grid.shape_px} does not match rgb {shape} "
                    f"in tile {self.tile_id!r}"
                )
        gsds = {
            round(g.gsd_m, 9)
            for g in (self.rgb, self.height_gt, self.normals_gt)
        } | {round(self.labels_gt.gsd_m, 9)}
        if len(gsds) != 1:
            raise ValueError(f"grids disagree on gsd in tile {self.tile_id!r}: {gsds}")
        if self.rgb.channels != 3:
            raise ValueError("rgb must have 3 channels")
        if self.height_gt.channels != 1:
            raise ValueError("height_gt must have 1 channel")
        if self.normals_gt.channels != 3:
            raise ValueError("normals_gt must have 3 channels")

    @property
    def shape_px(self) -> tuple[int, int]:
        return self.rgb.shape_px

    @property
    def gsd_m(self) -> float:
        return self.rgb.gsd_m

    @property
    def num_classes(self) -> int:
        return self.labels_gt.num_classes


@dataclass(frozen=True)
class CropSample:
    """Aligned training crop cut from one tile."""

    rgb: np.ndarray
    height: np.ndarray
    labels: np.ndarray
    normals: np.ndarray
    source_tile: str
    origin: tuple[int, int]

    @property
    def size_px(self) -> int:
        return self.rgb.shape[0]


@dataclass(frozen=True)
class SplitSpec:
    """Disjoint train/test tile id lists."""

    train_tiles: tuple[str, ...]
    test_tiles: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "train_tiles", tuple(self.train_tiles))
        object.__setattr__(self, "test_tiles", tuple(self.test_tiles))
        overlap = set(self.train_tiles) & set(self.test_tiles)
        if overlap:
            raise ValueError(f"train/test splits overlap: {sorted(overlap)}")


def derive_height(dsm: RasterGrid, dem: RasterGrid) -> RasterGrid:
    """Height above ground: surface model minus terrain model, clamped at 0.

    Small negative differences occur from sensor noise; the output
    represents height above terrain, so they are clamped away.
    """
    if dsm.shape_px != dem.shape_px or dsm.channels != 1 or dem.channels != 1:
        raise ValueError(
            f"surface/terrain grids must be aligned single-channel, "
            f"got {dsm.shape_px}x{dsm.channels} vs {dem.shape_px}x{dem.channels}"
        )
    if abs(dsm.gsd_m - dem.gsd_m) > 1e-9:
        raise ValueError(f"gsd mismatch: {dsm.gsd_m} vs {dem.gsd_m}")
    diff = np.maximum(dsm.data.astype(np.float64) - dem.data.astype(np.float64), 0.0)
    return RasterGrid(diff.astype(np.float32), dsm.gsd_m)


def load_scene(
    rgb_path: str | Path,
    height_path: str | Path,
    labels_path: str | Path,
    *,
    tile_id: str | None = None,
    num_classes: int,
    gsd_m: float = 1.0,
    rgb_downsample: int | str = "auto",
    normal_encoding: NormalEncoding = DEFAULT_NORMAL_ENCODING,
) -> SceneTile:
    """Load one scene tile from raster files.

    ``rgb_downsample`` handles imagery delivered at a finer resolution than
    its height map: an integer factor, or "auto" to infer the factor from
    the shape ratio (e.g. very-high-resolution RGB 10x the size of the
    surface model).
    """
    rgb = io.read_image(rgb_path, gsd_m)
    height = io.read_image(height_path, gsd_m)
    labels = io.read_labels(labels_path, num_classes, gsd_m)
    if height.channels != 1:
        raise ValueError(f"height raster must be single-channel: {height_path}")

    if rgb.shape_px != height.shape_px:
        if rgb_downsample == "auto":
            fr = rgb.height_px / height.height_px
            fc = rgb.width_px / height.width_px
            if fr != fc or fr != int(fr):
                raise ValueError(
                    f"rgb {rgb.shape_px} is not an integer multiple of "
                    f"height {height.shape_px}; cannot infer downsample factor"
                )
            factor = int(fr)
        else:
            factor = int(rgb_downsample)
        rgb = downsample(rgb, factor)
        rgb = RasterGrid(rgb.data, height.gsd_m)  # gsd now matches the height grid
    if rgb.shape_px != height.shape_px or labels.shape_px != height.shape_px:
        raise ValueError(
            f"misaligned tile rasters: rgb {rgb.shape_px}, "
            f"height {height.shape_px}, labels {labels.shape_px}"
        )
    normals = surface_normals(height, normal_encoding)
    tid = tile_id if tile_id is not None else Path(height_path).stem
    return SceneTile(rgb, height, labels, normals, tid)


def sample_crops(
    tile: SceneTile,
    n: int,
    size: int = 320,
    rng_seed: int = 0,
) -> list[CropSample]:
    """Sample n aligned crops with uniformly random origins (deterministic per seed)."""
    h, w = tile.shape_px
    if h < size or w < size:
        raise ValueError(f"tile {tile.tile_id!r} ({h}x{w}) smaller than crop size {size}")
    rng = np.random.default_rng(rng_seed)
    rows = rng.integers(0, h - size + 1, size=n)
    cols = rng.integers(0, w - size + 1, size=n)
    crops = []
    for r, c in zip(rows.tolist(), cols.tolist()):
        crops.append(
            CropSample(
                rgb=tile.rgb.data[r : r + size, c : c + size],
                height=tile.height_gt.data[r : r + size, c : c + size, 0],
                labels=tile.labels_gt.labels[r : r + size, c : c + size],
                normals=tile.normals_gt.data[r : r + size, c : c + size],
                source_tile=tile.tile_id,
                origin=(r, c),
            )
        )
    return crops


def crop_pool(
    tiles: Sequence[SceneTile],
    crops_per_tile: int,
    size: int,
    rng_seed: int,
) -> list[CropSample]:
    """Training pool: crops from every tile, per-tile seeds derived from the master."""
    pool: list[CropSample] = []
    for i, tile in enumerate(tiles):
        pool.extend(sample_crops(tile, crops_per_tile, size, rng_seed + 7919 * (i + 1)))
    return pool


# --- dataset directories -------------------------------------------------

def tile_paths(root: Path, tile_id: str) -> dict[str, Path]:
    return {
        "rgb": root / f"{tile_id}_rgb.hmap",
        "height": root / f"{tile_id}_height.hmap",
        "labels": root / f"{tile_id}_labels.hmap",
        "normals": root / f"{tile_id}_normals.hmap",
    }


def save_tile(root: str | Path, tile: SceneTile) -> dict[str, str]:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    paths = tile_paths(root, tile.tile_id)
    io.write_hmap(paths["rgb"], tile.rgb)
    io.write_hmap(paths["height"], tile.height_gt)
    io.write_hmap(paths["labels"], tile.labels_gt)
    io.write_hmap(paths["normals"], tile.normals_gt)
    return {k: p.name for k, p in paths.items()}


def load_tile(
    root: str | Path,
    tile_id: str,
    num_classes: int,
    normal_encoding: NormalEncoding = DEFAULT_NORMAL_ENCODING,
) -> SceneTile:
    root = Path(root)
    paths = tile_paths(root, tile_id)
    rgb = io.read_hmap(paths["rgb"])
    height = io.read_hmap(paths["height"])
    labels = io.read_hmap(paths["labels"], num_classes=num_classes)
    normals = io.read_hmap(paths["normals"])
    normals = RasterGrid(normals.data, normals.gsd_m, normal_encoding)
    return SceneTile(rgb, height, labels, normals, tile_id)


def write_manifest(root: str | Path, manifest: dict) -> None:
    path = Path(root) / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(root: str | Path) -> dict:
    path = Path(root) / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    return json.loads(path.read_text())


def load_split(
    root: str | Path,
    normal_encoding: NormalEncoding = DEFAULT_NORMAL_ENCODING,
) -> tuple[list[SceneTile], list[SceneTile], dict]:
    """Load the train and test tiles named by a dataset manifest."""
    manifest = read_manifest(root)
    num_classes = manifest["num_classes"]
    train, test = [], []
    for entry in manifest["tiles"]:
        tile = load_tile(root, entry["tile_id"], num_classes, normal_encoding)
        (train if entry["split"] == "train" else test).append(tile)
    return train, test, manifest
