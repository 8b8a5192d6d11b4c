"""Loss functions, loss-weight balancing, and the two-stage training protocol.

Stage 1 trains the multi-task network under a weighted sum of height MSE,
semantic cross-entropy, and normal MSE. Stage 2 freezes it and trains the
refiner on [RGB, predicted height, class probabilities, predicted normals]
against the ground-truth height.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .data import CropSample
from .models import MultiTaskNet, RefinerNet, assemble_refiner_input

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-12  # floor inside the cross-entropy log


class TrainingDiverged(RuntimeError):
    """Raised when a loss becomes non-finite; carries the offending step."""

    def __init__(self, step_index: int, value: float):
        self.step_index = step_index
        super().__init__(f"non-finite loss at optimization step {step_index}: {value}")


@dataclass(frozen=True)
class LossWeights:
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0

    def __post_init__(self):
        if min(self.w1, self.w2, self.w3) <= 0:
            raise ValueError(f"loss weights must be strictly positive: {self}")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 64
    epochs: int = 1
    steps_per_epoch: int = 50
    rng_seed: int = 0
    crop_size: int = 320

    def __post_init__(self):
        if (
            self.learning_rate <= 0
            or self.batch_size < 1
            or self.epochs < 0
            or self.steps_per_epoch < 1
            or self.crop_size < 1
        ):
            raise ValueError(f"invalid hyperparameters: {self}")


def _check_same_shape(pred: torch.Tensor, target: torch.Tensor, what: str) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"{what} shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")


def loss_height(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every pixel."""
    _check_same_shape(pred, target, "height")
    return ((pred - target) ** 2).mean()


def loss_semantic(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of per-pixel class distributions vs. index labels."""
    if probs.dim() != 4 or labels.dim() != 3 or probs.shape[0] != labels.shape[0]:
        raise ValueError(
            f"expected (B,C,H,W) probabilities and (B,H,W) labels, "
            f"got {tuple(probs.shape)} and {tuple(labels.shape)}"
        )
    num_classes = probs.shape[1]
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels outside [0, {num_classes})")
    logp = torch.log(torch.clamp(probs, min=LOG_CLAMP))
    picked = logp.gather(1, labels.unsqueeze(1).long())
    return -picked.mean()


def loss_normals(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all three encoded components."""
    _check_same_shape(pred, target, "normals")
    return ((pred - target) ** 2).mean()


def composite_loss(
    terms: tuple[torch.Tensor, torch.Tensor, torch.Tensor], weights: LossWeights
) -> torch.Tensor:
    lh, ls, ln = terms
    return weights.w1 * lh + weights.w2 * ls + weights.w3 * ln


def balance_from_means(m1: float, m2: float, m3: float) -> LossWeights:
    """Weights that bring the three loss terms to the scale of the first."""
    def ratio(m):
        if m <= 0 or not math.isfinite(m):
            log.warning("degenerate probe loss mean %r; using weight 1", m)
            return 1.0
        return m1 / m

    if m1 <= 0 or not math.isfinite(m1):
        log.warning("degenerate height loss mean %r; using unit weights", m1)
        return LossWeights(1.0, 1.0, 1.0)
    return LossWeights(1.0, ratio(m2), ratio(m3))


def stack_batch(crops: Sequence[CropSample], indices: Sequence[int]) -> dict[str, torch.Tensor]:
    """Stack crops into NCHW tensors (labels stay as NHW int64)."""
    rgb = np.stack([crops[i].rgb for i in indices]).transpose(0, 3, 1, 2)
    height = np.stack([crops[i].height for i in indices])[:, None]
    labels = np.stack([crops[i].labels for i in indices])
    normals = np.stack([crops[i].normals for i in indices]).transpose(0, 3, 1, 2)
    return {
        "rgb": torch.from_numpy(np.ascontiguousarray(rgb)),
        "height": torch.from_numpy(np.ascontiguousarray(height)),
        "labels": torch.from_numpy(np.ascontiguousarray(labels)).long(),
        "normals": torch.from_numpy(np.ascontiguousarray(normals)),
    }


def _loss_terms(outputs: dict[str, torch.Tensor], batch: dict[str, torch.Tensor]):
    return (
        loss_height(outputs["height"], batch["height"]),
        loss_semantic(outputs["semantics"], batch["labels"]),
        loss_normals(outputs["normals"], batch["normals"]),
    )


def auto_balance_weights(
    model: MultiTaskNet,
    probe_batches: Sequence[dict[str, torch.Tensor]],
) -> LossWeights:
    """Probe the unweighted loss means at current parameters and freeze
    weights that put the three terms on a common scale."""
    if not probe_batches:
        raise ValueError("need at least one probe batch")
    model.eval()
    sums = [0.0, 0.0, 0.0]
    with torch.no_grad():
        for batch in probe_batches:
            terms = _loss_terms(model(batch["rgb"]), batch)
            for i, t in enumerate(terms):
                sums[i] += float(t)
    n = len(probe_batches)
    return balance_from_means(sums[0] / n, sums[1] / n, sums[2] / n)


def _draw_indices(rng: np.random.Generator, n: int, batch_size: int) -> list[int]:
    take = min(batch_size, n)
    return rng.choice(n, size=take, replace=n < batch_size).tolist()


def train_stage1(
    model: MultiTaskNet,
    crops: Sequence[CropSample],
    config: TrainConfig,
    weights: LossWeights | None = None,
    log_every: int = 0,
) -> tuple[list[dict[str, float]], LossWeights]:
    """Optimize the multi-task net with Adam; returns per-epoch loss history.

    Weights default to an automatic balance probed at the initial
    parameters. The model is updated in place; training is deterministic
    for a given seed.
    """
    if not crops:
        raise ValueError("empty crop dataset")
    torch.manual_seed(config.rng_seed)
    rng = np.random.default_rng(config.rng_seed)
    if weights is None:
        probe = [
            stack_batch(crops, _draw_indices(rng, len(crops), config.batch_size))
            for _ in range(min(4, max(1, len(crops) // config.batch_size)))
        ]
        weights = auto_balance_weights(model, probe)
        log.info("auto-balanced loss weights: %s", weights)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    history: list[dict[str, float]] = []
    global_step = 0
    for epoch in range(config.epochs):
        model.train()
        sums = {"L_h": 0.0, "L_s": 0.0, "L_n": 0.0, "L": 0.0}
        for _ in range(config.steps_per_epoch):
            batch = stack_batch(crops, _draw_indices(rng, len(crops), config.batch_size))
            terms = _loss_terms(model(batch["rgb"]), batch)
            loss = composite_loss(terms, weights)
            if not torch.isfinite(loss):
                raise TrainingDiverged(global_step, float(loss))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            global_step += 1
            sums["L_h"] += float(terms[0].detach())
            sums["L_s"] += float(terms[1].detach())
            sums["L_n"] += float(terms[2].detach())
            sums["L"] += float(loss.detach())
        record = {k: v / config.steps_per_epoch for k, v in sums.items()}
        history.append(record)
        if log_every and (epoch + 1) % log_every == 0:
            log.info("stage1 epoch %d: %s", epoch + 1, record)
    return history, weights


def parameter_checksum(model: nn.Module) -> str:
    """SHA-256 over all state tensors; bit-identical state, identical digest."""
    digest = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def train_stage2(
    stage1: MultiTaskNet | None,
    refiner: RefinerNet,
    crops: Sequence[CropSample],
    config: TrainConfig,
    input_mask: torch.Tensor | None = None,
    cache_stage1: bool = False,
    stage1_outputs_fn: Callable[[dict], dict] | None = None,
    log_every: int = 0,
) -> list[dict[str, float]]:
    """Train the refiner against ground-truth heights with stage 1 frozen.

    Stage-1 outputs are produced on the fly under no_grad (or from an
    in-memory cache with ``cache_stage1``); any change to a stage-1
    parameter is a hard failure. ``stage1_outputs_fn`` substitutes the
    frozen network, e.g. to feed ground truth through the refiner input.
    ``input_mask`` zeroes refiner input channels for ablations.
    """
    if not crops:
        raise ValueError("empty crop dataset")
    if stage1 is None and stage1_outputs_fn is None:
        raise ValueError("need a trained stage-1 model or an outputs function")
    torch.manual_seed(config.rng_seed)
    rng = np.random.default_rng(config.rng_seed)
    checksum_before = parameter_checksum(stage1) if stage1 is not None else None
    if stage1 is not None:
        stage1.eval()
        stage1.requires_grad_(False)

    def stage1_outputs(batch):
        if stage1_outputs_fn is not None:
            return stage1_outputs_fn(batch)
        with torch.no_grad():
            return stage1(batch["rgb"])

    cache: dict[tuple[int, ...], tuple[torch.Tensor, torch.Tensor]] = {}

    def make_input(batch, key):
        if cache_stage1 and key in cache:
            return cache[key]
        out = stage1_outputs(batch)
        z = assemble_refiner_input(
            batch["rgb"], out["height"], out["semantics"], out["normals"], mask=input_mask
        )
        pair = (z, batch["height"])
        if cache_stage1:
            cache[key] = pair
        return pair

    optimizer = torch.optim.Adam(refiner.parameters(), lr=config.learning_rate)
    history: list[dict[str, float]] = []
    global_step = 0
    for epoch in range(config.epochs):
        refiner.train()
        total = 0.0
        for _ in range(config.steps_per_epoch):
            idx = _draw_indices(rng, len(crops), config.batch_size)
            batch = stack_batch(crops, idx)
            z, target = make_input(batch, tuple(idx))
            loss = loss_height(refiner(z), target)
            if not torch.isfinite(loss):
                raise TrainingDiverged(global_step, float(loss))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            global_step += 1
            total += float(loss.detach())
        record = {"L_r": total / config.steps_per_epoch}
        history.append(record)
        if log_every and (epoch + 1) % log_every == 0:
            log.info("stage2 epoch %d: %s", epoch + 1, record)
    if stage1 is not None and parameter_checksum(stage1) != checksum_before:
        raise RuntimeError("stage-1 parameters changed during stage-2 training")
    return history


def ground_truth_outputs_fn(num_classes: int) -> Callable[[dict], dict]:
    """Stage-1 stand-in that emits the batch's own ground truth (one-hot
    class probabilities); used by the refiner identity-learning probe."""

    def fn(batch):
        onehot = torch.nn.functional.one_hot(batch["labels"], num_classes)
        return {
            "height": batch["height"],
            "semantics": onehot.permute(0, 3, 1, 2).float(),
            "normals": batch["normals"],
        }

    return fn
