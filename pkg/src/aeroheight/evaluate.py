"""Full-tile reconstruction, metrics, uncertainty maps, and baselines.

Tiles larger than the training crop are predicted with a sliding window and
Gaussian-blended into full rasters; the final row and column of windows are
edge-aligned so coverage is total without synthesizing pixels. Semantic maps
are blended in probability space and argmaxed afterwards; normals are
blended per channel and re-normalized on decode.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import SceneTile
from .models import (
    MultiTaskNet,
    RefinerNet,
    assemble_refiner_input,
    forward_multitask,
    from_batch_tensor,
    to_batch_tensor,
)
from .raster import (
    DEFAULT_NORMAL_ENCODING,
    LabelGrid,
    NormalEncoding,
    RasterGrid,
    gaussian_window,
    window_origins,
)

log = logging.getLogger(__name__)

# predictor: (rgb_crops (B,h,w,3), origins) -> height/semantics/normals arrays
Predictor = Callable[[np.ndarray, Sequence[tuple[int, int]]], dict[str, np.ndarray]]
# refine: assembled (B,h,w,7+C) -> refined heights (B,h,w)
RefineFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ReconstructionConfig:
    crop_size: int = 320
    step_px: int = 60
    blend_sigma_px: float | None = None  # defaults to crop_size / 4
    batch_size: int = 8

    def __post_init__(self):
        if self.crop_size < 1 or self.step_px < 1 or self.batch_size < 1:
            raise ValueError(f"invalid reconstruction config: {self}")
        if self.step_px > self.crop_size:
            raise ValueError(
                f"step {self.step_px} exceeds crop {self.crop_size}; coverage would gap"
            )
        if self.blend_sigma_px is not None and self.blend_sigma_px <= 0:
            raise ValueError("blend_sigma_px must be positive")

    @property
    def sigma(self) -> float:
        return self.blend_sigma_px if self.blend_sigma_px is not None else self.crop_size / 4.0


@dataclass(frozen=True)
class HeightMetrics:
    mse: float
    mae: float
    rmse: float


@dataclass(frozen=True)
class SemanticMetrics:
    oa: float
    aa: float
    kappa: float
    confusion: np.ndarray = field(repr=False)
    absent_classes: tuple[int, ...] = ()


@dataclass(frozen=True)
class TilePrediction:
    height: RasterGrid
    labels: LabelGrid
    normals: RasterGrid
    class_probs: RasterGrid
    refined_height: RasterGrid | None = None


def multitask_predictor(model: MultiTaskNet, stochastic: bool = False) -> Predictor:
    def predict(rgb_crops, origins):
        return forward_multitask(model, rgb_crops, stochastic_dropout=stochastic)

    return predict


def refiner_predictor(model: RefinerNet, input_mask: torch.Tensor | None = None) -> RefineFn:
    def refine(z_batch):
        model.eval()
        z = to_batch_tensor(z_batch)
        if input_mask is not None:
            z = z * input_mask.to(z.dtype).view(1, -1, 1, 1)
        with torch.no_grad():
            out = model(z)
        return from_batch_tensor(out)[:, :, :, 0]

    return refine


def ground_truth_predictor(tile: SceneTile) -> Predictor:
    """Oracle predictor returning the tile's own ground truth per crop;
    the stitching-identity check for the reconstruction path."""
    onehot = np.eye(tile.num_classes, dtype=np.float32)[tile.labels_gt.labels]

    def predict(rgb_crops, origins):
        size = rgb_crops.shape[1]
        hs, ps, ns = [], [], []
        for r, c in origins:
            hs.append(tile.height_gt.data[r : r + size, c : c + size, 0])
            ps.append(onehot[r : r + size, c : c + size])
            ns.append(tile.normals_gt.data[r : r + size, c : c + size])
        return {"height": np.stack(hs), "semantics": np.stack(ps), "normals": np.stack(ns)}

    return predict


def predict_tile(
    predictor: Predictor,
    rgb_tile: RasterGrid,
    cfg: ReconstructionConfig,
    refine: RefineFn | None = None,
    normal_encoding: NormalEncoding = DEFAULT_NORMAL_ENCODING,
    clamp_height: bool = True,
) -> TilePrediction:
    """Sliding-window prediction blended into full-tile rasters."""
    h, w = rgb_tile.shape_px
    crop = cfg.crop_size
    if h < crop or w < crop:
        raise ValueError(f"tile {h}x{w} smaller than crop size {crop}")
    origins = [
        (r, c)
        for r in window_origins(h, crop, cfg.step_px)
        for c in window_origins(w, crop, cfg.step_px)
    ]
    weights = gaussian_window(crop, cfg.sigma).data[:, :, 0].astype(np.float64)

    den = np.zeros((h, w), dtype=np.float64)
    num_h = np.zeros((h, w), dtype=np.float64)
    num_r = np.zeros((h, w), dtype=np.float64) if refine is not None else None
    num_p: np.ndarray | None = None
    num_n = np.zeros((h, w, 3), dtype=np.float64)

    for start in range(0, len(origins), cfg.batch_size):
        batch_origins = origins[start : start + cfg.batch_size]
        rgb_crops = np.stack(
            [rgb_tile.data[r : r + crop, c : c + crop] for r, c in batch_origins]
        )
        out = predictor(rgb_crops, batch_origins)
        if num_p is None:
            num_p = np.zeros((h, w, out["semantics"].shape[-1]), dtype=np.float64)
        refined = None
        if refine is not None:
            z = assemble_refiner_input(
                to_batch_tensor(rgb_crops),
                to_batch_tensor(out["height"]),
                to_batch_tensor(out["semantics"]),
                to_batch_tensor(out["normals"]),
            )
            refined = refine(from_batch_tensor(z))
        for i, (r, c) in enumerate(batch_origins):
            sl = (slice(r, r + crop), slice(c, c + crop))
            den[sl] += weights
            num_h[sl] += weights * out["height"][i]
            num_p[sl] += weights[:, :, None] * out["semantics"][i]
            num_n[sl] += weights[:, :, None] * out["normals"][i]
            if refined is not None:
                num_r[sl] += weights * refined[i]

    if not (den > 0).all():
        raise RuntimeError("sliding-window coverage gap; this should be impossible")

    height = (num_h / den).astype(np.float32)
    probs = (num_p / den[:, :, None]).astype(np.float32)
    labels = probs.argmax(axis=-1).astype(np.int32)
    normals_enc = num_n / den[:, :, None]
    decoded = normal_encoding.decode(normals_enc, renormalize=True)
    normals = normal_encoding.encode(decoded).astype(np.float32)
    if clamp_height:
        height = np.maximum(height, 0.0)
    refined_grid = None
    if num_r is not None:
        refined = (num_r / den).astype(np.float32)
        if clamp_height:
            refined = np.maximum(refined, 0.0)
        refined_grid = RasterGrid(refined, rgb_tile.gsd_m)
    return TilePrediction(
        height=RasterGrid(height, rgb_tile.gsd_m),
        labels=LabelGrid(labels, probs.shape[-1], rgb_tile.gsd_m),
        normals=RasterGrid(normals, rgb_tile.gsd_m, normal_encoding),
        class_probs=RasterGrid(probs, rgb_tile.gsd_m),
        refined_height=refined_grid,
    )


def _as_plane(x) -> np.ndarray:
    if isinstance(x, RasterGrid):
        if x.channels != 1:
            raise ValueError("height metrics expect a single-channel grid")
        return x.data[:, :, 0].astype(np.float64)
    return np.asarray(x, dtype=np.float64)


def height_metrics(pred, gt) -> HeightMetrics:
    """MSE (m^2), MAE (m), RMSE (m) over all pixels."""
    p, g = _as_plane(pred), _as_plane(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    diff = p - g
    mse = float((diff**2).mean())
    return HeightMetrics(mse=mse, mae=float(np.abs(diff).mean()), rmse=math.sqrt(mse))


def _as_labels(x) -> np.ndarray:
    if isinstance(x, LabelGrid):
        return x.labels
    return np.asarray(x)


def semantic_metrics(pred_labels, gt_labels, num_classes: int) -> SemanticMetrics:
    """Overall accuracy, average per-class recall, and Cohen's kappa.

    Classes absent from the ground truth are excluded from the recall mean
    and reported in ``absent_classes``.
    """
    pred = _as_labels(pred_labels).ravel()
    gt = _as_labels(gt_labels).ravel()
    if pred.size == 0:
        raise ValueError("empty label arrays")
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    c = num_classes
    confusion = np.bincount(gt.astype(np.int64) * c + pred.astype(np.int64), minlength=c * c)
    confusion = confusion.reshape(c, c)
    total = confusion.sum()
    oa = float(np.trace(confusion) / total)
    row = confusion.sum(axis=1)
    col = confusion.sum(axis=0)
    present = row > 0
    recalls = np.diag(confusion)[present] / row[present]
    aa = float(recalls.mean())
    absent = tuple(int(i) for i in np.flatnonzero(~present))
    if absent:
        log.warning("classes absent from ground truth, excluded from AA: %s", absent)
    pe = float((row.astype(np.float64) * col).sum() / (total * total))
    if 1.0 - pe < 1e-12:
        kappa = 1.0 if oa == 1.0 else 0.0  # degenerate marginals
    else:
        kappa = (oa - pe) / (1.0 - pe)
    return SemanticMetrics(oa=oa, aa=aa, kappa=float(kappa), confusion=confusion, absent_classes=absent)


def uncertainty_map(
    model: MultiTaskNet,
    rgb_tile: RasterGrid,
    cfg: ReconstructionConfig,
    passes: int = 20,
    base_seed: int = 0,
    pass_seeds: Sequence[int] | None = None,
) -> RasterGrid:
    """Per-pixel variance of repeated stochastic-dropout reconstructions.

    Each pass rebuilds the full blended height map with dropout active under
    its own seed; the map is the pixelwise variance across passes (unclamped
    predictions, so the spread is the model's own).
    """
    seeds = list(pass_seeds) if pass_seeds is not None else [
        base_seed + 1_000_003 * t for t in range(passes)
    ]
    if len(seeds) < 2:
        raise ValueError("uncertainty needs at least 2 stochastic passes")
    if model.spec.dropout_rate == 0.0:
        log.warning("dropout_rate is 0; uncertainty map will be identically zero")
    maps = []
    for seed in seeds:
        torch.manual_seed(seed)
        pred = predict_tile(
            multitask_predictor(model, stochastic=True),
            rgb_tile,
            cfg,
            normal_encoding=model.spec.normal_encoding,
            clamp_height=False,
        )
        maps.append(pred.height.data[:, :, 0].astype(np.float64))
    variance = np.var(np.stack(maps), axis=0)
    return RasterGrid(variance.astype(np.float32), rgb_tile.gsd_m)


def bilateral_filter(height: RasterGrid, spatial_sigma: float, range_sigma: float) -> RasterGrid:
    """Edge-preserving smoothing; window radius is ceil(3 * spatial_sigma)."""
    if spatial_sigma <= 0 or range_sigma <= 0:
        raise ValueError("bilateral sigmas must be positive")
    if height.channels != 1:
        raise ValueError("bilateral filter expects a single-channel grid")
    plane = height.data[:, :, 0].astype(np.float64)
    radius = math.ceil(3 * spatial_sigma)
    padded = np.pad(plane, radius, mode="edge")
    h, w = plane.shape
    num = np.zeros_like(plane)
    den = np.zeros_like(plane)
    inv_2ss = 1.0 / (2.0 * spatial_sigma**2)
    inv_2rs = 1.0 / (2.0 * range_sigma**2)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            shifted = padded[radius + dy : radius + dy + h, radius + dx : radius + dx + w]
            weight = math.exp(-(dx * dx + dy * dy) * inv_2ss) * np.exp(
                -((shifted - plane) ** 2) * inv_2rs
            )
            num += weight * shifted
            den += weight
    return RasterGrid((num / den).astype(np.float32), height.gsd_m)


def nonlocal_means(
    height: RasterGrid, patch_px: int = 5, search_px: int = 6, h_param: float = 0.5
) -> RasterGrid:
    """Non-local means with Gaussian-weighted patch distances."""
    if height.channels != 1:
        raise ValueError("non-local means expects a single-channel grid")
    if patch_px < 1 or search_px < 1 or h_param <= 0:
        raise ValueError("invalid non-local means parameters")
    rows, cols = height.shape_px
    if patch_px + 2 * search_px >= min(rows, cols):
        raise ValueError(
            f"patch {patch_px} + search {search_px} exceed image extent {min(rows, cols)}"
        )
    from skimage.restoration import denoise_nl_means

    plane = height.data[:, :, 0].astype(np.float64)
    out = denoise_nl_means(
        plane, patch_size=patch_px, patch_distance=search_px, h=h_param, fast_mode=False
    )
    return RasterGrid(out.astype(np.float32), height.gsd_m)


ABLATION_FIELDS = ("variant", "step_px", "mse", "mae", "rmse")


def ablation_report(
    variants: dict,
    test_tiles: Sequence[SceneTile],
    cfg: ReconstructionConfig,
    steps: Sequence[int] = (40, 60, 80),
    bf_params: tuple[float, float] = (2.0, 1.0),
    nlm_params: tuple[int, int, float] = (5, 6, 0.5),
) -> list[dict]:
    """Height-error rows per variant and sliding-window step size.

    ``variants`` may hold 'stage1', 'refiner', 'stage1_single' (trained with
    the side losses zeroed), and 'refiner_single' (trained on the masked
    input); missing entries drop their rows with a warning. Errors aggregate
    over all pixels of all test tiles.
    """
    stage1 = variants.get("stage1")
    if stage1 is None:
        raise ValueError("ablation needs at least a 'stage1' model")
    encoding = stage1.spec.normal_encoding

    def metrics_rows(step):
        step_cfg = replace(cfg, step_px=step)
        refine = None
        if variants.get("refiner") is not None:
            refine = refiner_predictor(variants["refiner"])
        preds, gts, refined = [], [], []
        for tile in test_tiles:
            p = predict_tile(
                multitask_predictor(stage1), tile.rgb, step_cfg, refine=refine,
                normal_encoding=encoding,
            )
            preds.append(p)
            gts.append(tile.height_gt.data[:, :, 0])
            if p.refined_height is not None:
                refined.append(p.refined_height.data[:, :, 0])
        gt_all = np.concatenate([g.ravel() for g in gts])

        def hm(planes):
            return height_metrics(np.concatenate([p.ravel() for p in planes]), gt_all)

        rows = []

        def add(variant, metrics):
            rows.append(
                {
                    "variant": variant,
                    "step_px": step,
                    "mse": metrics.mse,
                    "mae": metrics.mae,
                    "rmse": metrics.rmse,
                }
            )

        stage1_planes = [p.height.data[:, :, 0] for p in preds]
        add("multi-task", hm(stage1_planes))
        add(
            "multi-task+bilateral",
            hm([
                bilateral_filter(p.height, *bf_params).data[:, :, 0] for p in preds
            ]),
        )
        add(
            "multi-task+nlm",
            hm([
                nonlocal_means(p.height, *nlm_params).data[:, :, 0] for p in preds
            ]),
        )
        if refined:
            add("multi-task+refiner", hm(refined))
        else:
            log.warning("no refiner supplied; omitting 'multi-task+refiner' rows")

        single = variants.get("stage1_single")
        if single is not None:
            planes = [
                predict_tile(
                    multitask_predictor(single), tile.rgb, step_cfg,
                    normal_encoding=single.spec.normal_encoding,
                ).height.data[:, :, 0]
                for tile in test_tiles
            ]
            add("single-task", hm(planes))
        else:
            log.warning("no single-task variant supplied; omitting its rows")

        refiner_single = variants.get("refiner_single")
        if refiner_single is not None:
            model, mask = refiner_single
            refine_single = refiner_predictor(model, input_mask=mask)
            planes = [
                predict_tile(
                    multitask_predictor(stage1), tile.rgb, step_cfg, refine=refine_single,
                    normal_encoding=encoding,
                ).refined_height.data[:, :, 0]
                for tile in test_tiles
            ]
            add("multi-task+refiner-single-input", hm(planes))
        else:
            log.warning("no single-input refiner supplied; omitting its rows")
        return rows

    report = []
    for step in steps:
        report.extend(metrics_rows(step))
    return report


def write_report_csv(rows: Sequence[dict], path: str | Path, fields: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in fields})
