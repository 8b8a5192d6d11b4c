"""Procedural synthetic city tiles for desk-scale training and evaluation.

A tile is flat ground with axis-aligned box buildings, roads, vegetation
blobs, and cars; labels and heights are exact by construction and normals
are re-derived from the height grid. RGB is rendered from class colors with
Lambertian shading from the true normals plus pixel noise. Rendering adds
two monocular height cues — cast shadows and roof brightness tied to
building height — so per-pixel height is actually inferable from a single
image, mirroring the cue structure of real aerial scenes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy import ndimage

from .data import SceneTile
from .raster import (
    DEFAULT_NORMAL_ENCODING,
    LabelGrid,
    NormalEncoding,
    RasterGrid,
    surface_normals,
)

CLASS_GROUND = 0
CLASS_ROAD = 1
CLASS_BUILDING = 2
CLASS_LOW_VEG = 3
CLASS_TREE = 4
CLASS_CAR = 5

CLASS_NAMES = ("ground", "road", "building", "low_vegetation", "tree", "car")

# Default class palette, uint8 RGB per class index.
DEFAULT_PALETTE = (
    (140, 133, 122),
    (64, 64, 68),
    (184, 107, 92),
    (115, 166, 89),
    (38, 107, 46),
    (51, 89, 179),
)


@dataclass(frozen=True)
class CityParams:
    """Knobs for the generator; None counts scale with tile area."""

    roads_per_axis: int = 2
    road_width_px: int = 9
    building_attempts: int | None = None
    building_size_px: tuple[int, int] = (14, 44)
    building_height_m: tuple[float, float] = (3.0, 30.0)
    veg_blobs: int | None = None
    veg_radius_px: tuple[int, int] = (6, 22)
    low_veg_height_m: tuple[float, float] = (1.0, 3.0)
    tree_height_m: tuple[float, float] = (4.0, 8.0)
    car_density: float = 1 / 1500.0  # cars per road pixel
    margin_px: int = 3
    noise_sigma: float = 0.02
    height_cues: bool = True
    sun_slope: float = 2.0  # meters of height per meter toward the sun
    shadow_dim: float = 0.55
    ambient: float = 0.45

    @staticmethod
    def empty() -> "CityParams":
        """No structures at all: a flat, single-class world."""
        return CityParams(roads_per_axis=0, building_attempts=0, veg_blobs=0, car_density=0.0)


def _uniform(rng: np.random.Generator, lohi: tuple[float, float]) -> float:
    return float(rng.uniform(lohi[0], lohi[1]))


def generate_city_tile(
    seed: int,
    size_px: int = 480,
    num_classes: int = 6,
    params: CityParams | None = None,
    gsd_m: float = 0.5,
    normal_encoding: NormalEncoding = DEFAULT_NORMAL_ENCODING,
    tile_id: str | None = None,
) -> tuple[SceneTile, dict[str, Any]]:
    """Generate one deterministic synthetic tile and its metadata."""
    if num_classes < 2:
        raise ValueError("synthetic tiles need at least 2 classes")
    if num_classes > len(CLASS_NAMES):
        raise ValueError(f"at most {len(CLASS_NAMES)} synthetic classes available")
    p = params if params is not None else CityParams()
    rng = np.random.default_rng(seed)
    s = size_px

    height = np.zeros((s, s), dtype=np.float64)
    labels = np.zeros((s, s), dtype=np.int32)
    albedo_scale = np.ones((s, s), dtype=np.float64)

    # roads: straight stripes along both axes
    h_road = np.zeros((s, s), dtype=bool)
    v_road = np.zeros((s, s), dtype=bool)
    if num_classes > CLASS_ROAD and p.roads_per_axis > 0:
        for _ in range(p.roads_per_axis):
            r = int(rng.integers(0, s - p.road_width_px))
            h_road[r : r + p.road_width_px, :] = True
        for _ in range(p.roads_per_axis):
            c = int(rng.integers(0, s - p.road_width_px))
            v_road[:, c : c + p.road_width_px] = True
        labels[h_road | v_road] = CLASS_ROAD
    road_mask = h_road | v_road

    # buildings: rejection-placed boxes kept off roads
    n_buildings = 0
    if num_classes > CLASS_BUILDING:
        attempts = p.building_attempts
        if attempts is None:
            attempts = (s * s) // 800
        forbidden = road_mask
        if p.margin_px > 0 and road_mask.any():
            forbidden = ndimage.binary_dilation(road_mask, iterations=p.margin_px)
        occupied = forbidden.copy()
        lo, hi = p.building_size_px
        for _ in range(attempts):
            bw = int(rng.integers(lo, hi + 1))
            bh = int(rng.integers(lo, hi + 1))
            if bh + 2 >= s or bw + 2 >= s:
                continue
            r = int(rng.integers(1, s - bh - 1))
            c = int(rng.integers(1, s - bw - 1))
            hm = _uniform(rng, p.building_height_m)
            region = (slice(r, r + bh), slice(c, c + bw))
            if occupied[region].any():
                continue
            height[region] = hm
            labels[region] = CLASS_BUILDING
            occupied[region] = True
            if p.height_cues:
                span = p.building_height_m[1] - p.building_height_m[0]
                frac = (hm - p.building_height_m[0]) / max(span, 1e-9)
                albedo_scale[region] = 0.55 + 0.45 * frac
            n_buildings += 1

    # vegetation: elliptical blobs with smooth bump texture
    bump = ndimage.gaussian_filter(rng.standard_normal((s, s)), sigma=6.0)
    bump = (bump - bump.min()) / max(bump.max() - bump.min(), 1e-9)
    n_veg = p.veg_blobs if p.veg_blobs is not None else (s * s) // 8000
    if num_classes <= CLASS_LOW_VEG:
        n_veg = 0
    for _ in range(n_veg):
        is_tree = num_classes > CLASS_TREE and rng.random() < 0.5
        cls = CLASS_TREE if is_tree else CLASS_LOW_VEG
        rad_r = int(rng.integers(p.veg_radius_px[0], p.veg_radius_px[1] + 1))
        rad_c = int(rng.integers(p.veg_radius_px[0], p.veg_radius_px[1] + 1))
        cr = int(rng.integers(0, s))
        cc = int(rng.integers(0, s))
        r0, r1 = max(cr - rad_r, 0), min(cr + rad_r + 1, s)
        c0, c1 = max(cc - rad_c, 0), min(cc + rad_c + 1, s)
        rr, cc_grid = np.ogrid[r0:r1, c0:c1]
        inside = ((rr - cr) / rad_r) ** 2 + ((cc_grid - cc) / rad_c) ** 2 <= 1.0
        window = (slice(r0, r1), slice(c0, c1))
        paintable = inside & (labels[window] == CLASS_GROUND)
        if not paintable.any():
            continue
        lohi = p.tree_height_m if is_tree else p.low_veg_height_m
        base = _uniform(rng, (lohi[0], 0.5 * (lohi[0] + lohi[1])))
        amp = lohi[1] - base
        blob_h = np.clip(base + amp * bump[window], lohi[0], lohi[1])
        height[window] = np.where(paintable, blob_h, height[window])
        labels[window] = np.where(paintable, cls, labels[window])

    # cars: small boxes on roads, oriented with the carriageway
    n_cars = 0
    if num_classes > CLASS_CAR and p.car_density > 0 and road_mask.any():
        want = int(road_mask.sum() * p.car_density)
        road_idx = np.argwhere(road_mask)
        for _ in range(want):
            r, c = road_idx[int(rng.integers(0, len(road_idx)))]
            ch, cw = (2, 5) if h_road[r, c] else (5, 2)
            if r + ch > s or c + cw > s:
                continue
            region = (slice(r, r + ch), slice(c, c + cw))
            if not (labels[region] == CLASS_ROAD).all():
                continue
            height[region] = 1.5
            labels[region] = CLASS_CAR
            n_cars += 1

    height_grid = RasterGrid(height.astype(np.float32), gsd_m)
    normals_grid = surface_normals(height_grid, normal_encoding)

    # render: albedo * (ambient + diffuse * lambert) * shadow + noise
    palette01 = np.asarray(DEFAULT_PALETTE[:num_classes], dtype=np.float64) / 255.0
    albedo = palette01[labels] * albedo_scale[:, :, None]
    n_vec = normal_encoding.decode(normals_grid.data.astype(np.float64))
    light = np.array([-0.447, 0.0, 0.894])  # sun low in the -x (west) direction
    lambert = np.clip(n_vec @ light, 0.0, 1.0)
    shade = p.ambient + (1.0 - p.ambient) * lambert
    if p.height_cues:
        drop = p.sun_slope * gsd_m  # meters of shadow-height lost per pixel east
        ray = np.empty_like(height)
        ray[:, 0] = height[:, 0]
        for c in range(1, s):
            ray[:, c] = np.maximum(height[:, c], ray[:, c - 1] - drop)
        shadowed = ray > height + 1e-6
        shade = shade * np.where(shadowed, p.shadow_dim, 1.0)
    rgb = albedo * shade[:, :, None]
    rgb = rgb + rng.normal(0.0, p.noise_sigma, size=rgb.shape)
    rgb = np.clip(rgb, 0.0, 1.0)

    tid = tile_id if tile_id is not None else f"synth-{seed:05d}"
    tile = SceneTile(
        rgb=RasterGrid(rgb.astype(np.float32), gsd_m),
        height_gt=height_grid,
        labels_gt=LabelGrid(labels, num_classes, gsd_m),
        normals_gt=normals_grid,
        tile_id=tid,
    )
    counts = np.bincount(labels.ravel(), minlength=num_classes)
    meta = {
        "seed": int(seed),
        "size_px": int(size_px),
        "num_classes": int(num_classes),
        "gsd_m": float(gsd_m),
        "n_buildings": n_buildings,
        "n_cars": n_cars,
        "class_fractions": {
            CLASS_NAMES[i]: float(counts[i] / counts.sum()) for i in range(num_classes)
        },
        "degenerate": bool(n_buildings == 0 and n_veg == 0 and not road_mask.any()),
        "normal_encoding": normal_encoding.value,
    }
    return tile, meta
