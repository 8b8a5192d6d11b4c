"""Raster grid containers and the grid operations the pipeline is built on.

Grids are thin immutable wrappers around numpy arrays in row-major (H, W, C)
layout, carrying a ground-sample distance in meters per pixel. All operations
are pure: they return new grids and never mutate their inputs.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

# 3x3 derivative kernels, applied as correlation (no kernel flip).
SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()

# Smallest weight a blending window may carry; keeps weights strictly
# positive even when the Gaussian underflows.
_MIN_WEIGHT = float(np.finfo(np.float32).tiny)


class NormalEncoding(enum.Enum):
    """Affine packing of unit normals into a raster-friendly range.

    HALF_PLUS_ONE stores n/2 + 1 (components in [0.5, 1.5]);
    UNIT_INTERVAL stores (n+1)/2 (components in [0, 1]).
    """

    HALF_PLUS_ONE = "half-plus-one"
    UNIT_INTERVAL = "unit-interval"

    def encode(self, normals: np.ndarray) -> np.ndarray:
        if self is NormalEncoding.HALF_PLUS_ONE:
            return normals / 2.0 + 1.0
        return (normals + 1.0) / 2.0

    def decode(self, encoded: np.ndarray, renormalize: bool = False) -> np.ndarray:
        if self is NormalEncoding.HALF_PLUS_ONE:
            n = (encoded - 1.0) * 2.0
        else:
            n = encoded * 2.0 - 1.0
        if renormalize:
            norm = np.linalg.norm(n, axis=-1, keepdims=True)
            n = n / np.maximum(norm, 1e-12)
        return n


DEFAULT_NORMAL_ENCODING = NormalEncoding.HALF_PLUS_ONE


@dataclass(frozen=True)
class RasterGrid:
    """H x W x C float32 grid with a ground-sample distance in meters/pixel."""

    data: np.ndarray
    gsd_m: float = 1.0
    normal_encoding: NormalEncoding | None = None

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"grid data must be (H, W, C), got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("grid data contains NaN or Inf")
        if not self.gsd_m > 0:
            raise ValueError(f"gsd_m must be positive, got {self.gsd_m}")
        object.__setattr__(self, "data", np.ascontiguousarray(arr))

    @property
    def height_px(self) -> int:
        return self.data.shape[0]

    @property
    def width_px(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape_px(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]

    def plane(self, channel: int = 0) -> np.ndarray:
        """Single channel as a 2D view."""
        return self.data[:, :, channel]

    def crop(self, row: int, col: int, height: int, width: int) -> "RasterGrid":
        if row < 0 or col < 0 or row + height > self.height_px or col + width > self.width_px:
            raise ValueError(
                f"crop ({row},{col})+({height},{width}) exceeds grid {self.shape_px}"
            )
        return RasterGrid(
            self.data[row : row + height, col : col + width].copy(),
            self.gsd_m,
            self.normal_encoding,
        )


@dataclass(frozen=True)
class LabelGrid:
    """H x W integer class-index grid."""

    labels: np.ndarray
    num_classes: int
    gsd_m: float = 1.0

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.ndim != 2:
            raise ValueError(f"labels must be 2D, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError(f"labels must be integers, got dtype {arr.dtype}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if arr.size and (arr.min() < 0 or arr.max() >= self.num_classes):
            raise ValueError(
                f"labels out of range [0, {self.num_classes}): "
                f"min={arr.min()}, max={arr.max()}"
            )
        object.__setattr__(self, "labels", np.ascontiguousarray(arr.astype(np.int32)))

    @property
    def height_px(self) -> int:
        return self.labels.shape[0]

    @property
    def width_px(self) -> int:
        return self.labels.shape[1]

    @property
    def shape_px(self) -> tuple[int, int]:
        return self.labels.shape

    def crop(self, row: int, col: int, height: int, width: int) -> "LabelGrid":
        return LabelGrid(
            self.labels[row : row + height, col : col + width].copy(),
            self.num_classes,
            self.gsd_m,
        )


def _require_single_channel(grid: RasterGrid, op: str) -> np.ndarray:
    if grid.channels != 1:
        raise ValueError(f"{op} expects a single-channel grid, got {grid.channels} channels")
    return grid.data[:, :, 0]


def sobel(grid: RasterGrid, axis: int) -> RasterGrid:
    """3x3 Sobel derivative with replicate padding.

    axis 0 is the horizontal derivative (positive toward increasing column),
    axis 1 the vertical derivative (positive toward increasing row).
    """
    plane = _require_single_channel(grid, "sobel")
    if axis == 0:
        kernel = SOBEL_X
    elif axis == 1:
        kernel = SOBEL_Y
    else:
        raise ValueError(f"axis must be 0 or 1, got {axis}")
    out = ndimage.correlate(plane.astype(np.float64), kernel, mode="nearest")
    return RasterGrid(out.astype(np.float32), grid.gsd_m)


def surface_normals(
    height: RasterGrid,
    encoding: NormalEncoding = DEFAULT_NORMAL_ENCODING,
    metric: bool = False,
) -> RasterGrid:
    """Per-pixel surface normals of a height grid, stored encoded.

    Gradients come from the Sobel operator; the unnormalized normal is
    (-zx, -zy, 1). With ``metric=True`` the gradients are rescaled by
    1/(8*gsd) so the normal reflects meters-per-meter slope rather than the
    raw pixel-domain filter response.
    """
    plane = _require_single_channel(height, "surface_normals").astype(np.float64)
    zx = ndimage.correlate(plane, SOBEL_X, mode="nearest")
    zy = ndimage.correlate(plane, SOBEL_Y, mode="nearest")
    if metric:
        zx = zx / (8.0 * height.gsd_m)
        zy = zy / (8.0 * height.gsd_m)
    n = np.stack([-zx, -zy, np.ones_like(zx)], axis=-1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return RasterGrid(encoding.encode(n).astype(np.float32), height.gsd_m, encoding)


def downsample(grid: RasterGrid, factor: int) -> RasterGrid:
    """Area-average (box) downsampling by an integer factor.

    Dimensions not divisible by the factor are first padded by edge
    replication. The ground-sample distance grows by the same factor.
    """
    if int(factor) != factor or factor < 1:
        raise ValueError(f"factor must be a positive integer, got {factor}")
    factor = int(factor)
    if factor == 1:
        return RasterGrid(grid.data.copy(), grid.gsd_m, grid.normal_encoding)
    data = grid.data
    pad_r = (-data.shape[0]) % factor
    pad_c = (-data.shape[1]) % factor
    if pad_r or pad_c:
        data = np.pad(data, ((0, pad_r), (0, pad_c), (0, 0)), mode="edge")
    h, w, c = data.shape
    blocks = data.reshape(h // factor, factor, w // factor, factor, c)
    out = blocks.astype(np.float64).mean(axis=(1, 3))
    return RasterGrid(out.astype(np.float32), grid.gsd_m * factor)


def gaussian_window(size_px: int, sigma_px: float) -> RasterGrid:
    """Square Gaussian blending weights with continuous peak 1.0.

    The Gaussian is centered at the window center (size-1)/2; for even sizes
    no pixel sits exactly on the center, so the largest sampled weight is
    slightly below 1. Weights are floored at float32-tiny so they stay
    strictly positive for any sigma.
    """
    if size_px < 1:
        raise ValueError(f"size_px must be >= 1, got {size_px}")
    if not sigma_px > 0:
        raise ValueError(f"sigma_px must be positive, got {sigma_px}")
    center = (size_px - 1) / 2.0
    coords = np.arange(size_px, dtype=np.float64) - center
    w1d = np.exp(-(coords**2) / (2.0 * sigma_px**2))
    w = np.outer(w1d, w1d)
    w = np.maximum(w, _MIN_WEIGHT)
    return RasterGrid(w.astype(np.float32), 1.0)


@dataclass(frozen=True)
class StitchResult:
    """Blended grid plus a per-pixel coverage flag."""

    grid: RasterGrid
    valid: np.ndarray = field(repr=False)

    @property
    def fully_covered(self) -> bool:
        return bool(self.valid.all())

    @property
    def coverage_fraction(self) -> float:
        return float(self.valid.mean())


def stitch(
    crops: Sequence[tuple[RasterGrid, int, int]],
    weights: RasterGrid,
    out_shape: tuple[int, int],
) -> StitchResult:
    """Weighted blend of crops into an output grid.

    Each crop is a (grid, row_offset, col_offset) triple; all crops must
    match the weights' shape and fit inside ``out_shape``. Output pixels are
    the weight-normalized mean of covering crops; uncovered pixels hold zero
    and are flagged invalid. Accumulation runs in float64 in list order so
    the result is deterministic.
    """
    if not crops:
        raise ValueError("stitch needs at least one crop")
    wplane = _require_single_channel(weights, "stitch weights").astype(np.float64)
    ch, cw = weights.shape_px
    out_h, out_w = out_shape
    channels = crops[0][0].channels
    gsd = crops[0][0].gsd_m
    num = np.zeros((out_h, out_w, channels), dtype=np.float64)
    den = np.zeros((out_h, out_w), dtype=np.float64)
    for grid, row, col in crops:
        if grid.shape_px != (ch, cw):
            raise ValueError(f"crop shape {grid.shape_px} does not match weights {(ch, cw)}")
        if grid.channels != channels:
            raise ValueError("crops disagree on channel count")
        if row < 0 or col < 0 or row + ch > out_h or col + cw > out_w:
            raise ValueError(f"crop at ({row},{col}) does not fit inside {out_shape}")
        num[row : row + ch, col : col + cw] += wplane[:, :, None] * grid.data
        den[row : row + ch, col : col + cw] += wplane
    valid = den > 0
    safe_den = np.where(valid, den, 1.0)
    blended = (num / safe_den[:, :, None]).astype(np.float32)
    blended[~valid] = 0.0
    return StitchResult(RasterGrid(blended, gsd), valid)


def window_origins(extent_px: int, crop_px: int, step_px: int) -> list[int]:
    """Sliding-window origins covering [0, extent): a regular grid of steps
    plus a final edge-aligned window when the last step falls short."""
    if crop_px > extent_px:
        raise ValueError(f"crop {crop_px} exceeds extent {extent_px}")
    if step_px < 1:
        raise ValueError(f"step must be >= 1, got {step_px}")
    origins = list(range(0, extent_px - crop_px + 1, step_px))
    if origins[-1] != extent_px - crop_px:
        origins.append(extent_px - crop_px)
    return origins
