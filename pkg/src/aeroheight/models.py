"""Network architectures: the triple-branch multi-task predictor and the
denoising-autoencoder refiner.

Both networks are built from declarative specs so the full-width reference
configuration and the narrow desk configuration share one code path. The
multi-task net has a shared encoder and three decoders (height, semantics,
normals); at every decoder stage the height branch additionally fuses the
same-stage features of the other two branches, which is what widens its
concatenations to 3x the stage width.
"""

from __future__ import annotations

import io as _io
import json
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .raster import DEFAULT_NORMAL_ENCODING, NormalEncoding

ENCODER_FAMILIES = ("dense-skip", "plain-conv")

# Reference encoder widths by downsampling ratio (divide by EncoderSpec.width_divisor).
_REFERENCE_SKIP_WIDTHS = {2: 64, 4: 256, 8: 512, 16: 1024}
_REFERENCE_BOTTLENECK = 1024
_REFERENCE_STAGE_WIDTHS = (1024, 512, 256, 64, 32)
_REFERENCE_REFINER_ENC = (64, 128, 256, 512, 1024)
_REFERENCE_REFINER_DEC = (512, 256, 128, 64)


@dataclass(frozen=True)
class EncoderSpec:
    """Shared feature extractor: family plus a width divisor.

    Both families expose skip features at 1/2, 1/4, 1/8, 1/16 resolution and
    a 1/32 bottleneck; reference widths are 64/256/512/1024 with a 1024
    bottleneck, scaled down by ``width_divisor``.
    """

    family: str = "dense-skip"
    width_divisor: int = 1

    def __post_init__(self):
        if self.family not in ENCODER_FAMILIES:
            raise ValueError(f"unknown encoder family {self.family!r}")
        d = self.width_divisor
        if d < 1 or 64 % d or 32 % d:
            raise ValueError(f"width_divisor must divide 32 and 64, got {d}")

    @property
    def skip_channels(self) -> dict[int, int]:
        return {r: w // self.width_divisor for r, w in _REFERENCE_SKIP_WIDTHS.items()}

    @property
    def bottleneck_channels(self) -> int:
        return _REFERENCE_BOTTLENECK // self.width_divisor


@dataclass(frozen=True)
class MultiTaskSpec:
    num_classes: int
    input_size: tuple[int, int, int] = (320, 320, 3)
    encoder: EncoderSpec = EncoderSpec()
    stage_widths: tuple[int, ...] = _REFERENCE_STAGE_WIDTHS
    dropout_rate: float = 0.2
    normal_encoding: NormalEncoding = DEFAULT_NORMAL_ENCODING

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(self.input_size))
        object.__setattr__(self, "stage_widths", tuple(self.stage_widths))
        h, w, c = self.input_size
        if c != 3:
            raise ValueError(f"expected 3 input channels, got {c}")
        if h % 32 or w % 32:
            raise ValueError(f"input size {h}x{w} must be divisible by 32")
        if len(self.stage_widths) != 5:
            raise ValueError("stage_widths must list 5 decoder stages")
        if any(wd < 1 for wd in self.stage_widths):
            raise ValueError("stage widths must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


@dataclass(frozen=True)
class RefinerSpec:
    """U-Net refiner over [RGB, height, class probabilities, normals]."""

    num_classes: int
    encoder_widths: tuple[int, ...] = _REFERENCE_REFINER_ENC
    decoder_widths: tuple[int, ...] = _REFERENCE_REFINER_DEC

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(self.encoder_widths))
        object.__setattr__(self, "decoder_widths", tuple(self.decoder_widths))
        if len(self.encoder_widths) != 5 or len(self.decoder_widths) != 4:
            raise ValueError("refiner needs 5 encoder and 4 decoder widths")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    @property
    def input_channels(self) -> int:
        return 3 + 1 + self.num_classes + 3


def scaled_multitask_spec(num_classes: int, width_divisor: int, **kwargs) -> MultiTaskSpec:
    """Reference topology with every width divided by ``width_divisor``."""
    widths = tuple(w // width_divisor for w in _REFERENCE_STAGE_WIDTHS)
    encoder = EncoderSpec(kwargs.pop("family", "plain-conv"), width_divisor)
    return MultiTaskSpec(
        num_classes=num_classes, encoder=encoder, stage_widths=widths, **kwargs
    )


def scaled_refiner_spec(num_classes: int, width_divisor: int) -> RefinerSpec:
    return RefinerSpec(
        num_classes=num_classes,
        encoder_widths=tuple(w // width_divisor for w in _REFERENCE_REFINER_ENC),
        decoder_widths=tuple(w // width_divisor for w in _REFERENCE_REFINER_DEC),
    )


class Cat(nn.Module):
    """Channel concatenation as a module, so shape traces can hook it."""

    def forward(self, *tensors):
        return torch.cat(tensors, dim=1)


class PlainConvEncoder(nn.Module):
    """Five stride-2 conv blocks; cheap desk-scale encoder."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        skips = spec.skip_channels
        widths = [skips[2], skips[4], skips[8], skips[16], spec.bottleneck_channels]
        blocks = []
        prev = 3
        for w in widths:
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(prev, w, 3, stride=2, padding=1),
                    nn.ReLU(inplace=True),
                    nn.Conv2d(w, w, 3, padding=1),
                    nn.ReLU(inplace=True),
                )
            )
            prev = w
        self.blocks = nn.ModuleList(blocks)
        self.bottleneck = nn.Identity()

    def forward(self, x):
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        skips = {2: feats[0], 4: feats[1], 8: feats[2], 16: feats[3]}
        return self.bottleneck(feats[4]), skips


class DenseSkipEncoder(nn.Module):
    """Densely connected encoder trunk with skip taps at each resolution.

    Width divisor 1 reproduces the standard 121-layer configuration
    (growth 32, blocks 6/12/24/16, 64 initial features) with its
    64/256/512/1024 skips and 1024-channel 1/32 bottleneck.
    """

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        from torchvision.models.densenet import DenseNet

        d = spec.width_divisor
        net = DenseNet(
            growth_rate=32 // d,
            block_config=(6, 12, 24, 16),
            num_init_features=64 // d,
        )
        self.features = net.features
        self.bottleneck = nn.Identity()

    def forward(self, x):
        skips = {}
        for name, module in self.features.named_children():
            x = module(x)
            if name == "relu0":
                skips[2] = x
            elif name == "denseblock1":
                skips[4] = x
            elif name == "denseblock2":
                skips[8] = x
            elif name == "denseblock3":
                skips[16] = x
        return self.bottleneck(F.relu(x)), skips


def _build_encoder(spec: EncoderSpec) -> nn.Module:
    if spec.family == "dense-skip":
        return DenseSkipEncoder(spec)
    return PlainConvEncoder(spec)


class DecoderStage(nn.Module):
    """x2 transposed-conv upsampling, concat with skips, two 3x3 convs.

    The concatenation holds [upsampled features, projected encoder skip] and,
    for the height branch, a 1x1-projected fusion of the same-stage semantic
    and normal features — three stage-width blocks in total.
    """

    def __init__(self, in_ch, width, skip_ch=None, cross_ch=None, dropout=None):
        super().__init__()
        self.up = nn.ConvTranspose2d(in_ch, width, 2, stride=2)
        self.dropout = nn.Dropout(dropout) if dropout is not None else None
        self.skip_proj = nn.Conv2d(skip_ch, width, 1) if skip_ch else None
        self.cross_proj = nn.Conv2d(cross_ch, width, 1) if cross_ch else None
        parts = 2 + (1 if cross_ch else 0)
        self.cat = Cat()
        self.conv1 = nn.Conv2d(width * parts, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, x, skip, cross=None):
        u = F.relu(self.up(x))
        if self.dropout is not None:
            u = self.dropout(u)
        s = self.skip_proj(skip) if self.skip_proj is not None else skip
        parts = [u, s]
        if cross is not None:
            parts.append(self.cross_proj(cross))
        y = self.cat(*parts)
        y = F.relu(self.conv1(y))
        return F.relu(self.conv2(y))


class MultiTaskNet(nn.Module):
    """Shared encoder, three decoder branches, three heads."""

    def __init__(self, spec: MultiTaskSpec):
        super().__init__()
        self.spec = spec
        self.encoder = _build_encoder(spec.encoder)
        skip_ch = spec.encoder.skip_channels
        widths = spec.stage_widths
        # full-resolution skip source for stage 5 (no encoder feature there)
        self.rgb_skip = nn.Conv2d(3, widths[4], 3, padding=1)

        skip_ratio = [16, 8, 4, 2, None]
        branches = {}
        for branch in ("height", "semantic", "normal"):
            stages = []
            prev = spec.encoder.bottleneck_channels
            for k in range(5):
                ratio = skip_ratio[k]
                stages.append(
                    DecoderStage(
                        prev,
                        widths[k],
                        skip_ch=skip_ch[ratio] if ratio else None,
                        cross_ch=2 * widths[k] if branch == "height" else None,
                        dropout=spec.dropout_rate if branch == "height" else None,
                    )
                )
                prev = widths[k]
            branches[branch] = nn.ModuleList(stages)
        self.branches = nn.ModuleDict(branches)
        self.heads = nn.ModuleDict(
            {
                "height": nn.Conv2d(widths[4], 1, 1),
                "semantic": nn.Conv2d(widths[4], spec.num_classes, 1),
                "normal": nn.Conv2d(widths[4], 3, 1),
            }
        )

    def forward(self, x):
        if x.shape[-2] % 32 or x.shape[-1] % 32:
            raise ValueError(f"input {tuple(x.shape)} not divisible by 32")
        bottleneck, skips = self.encoder(x)
        rgb_feat = self.rgb_skip(x)
        h = s = n = bottleneck
        skip_ratio = [16, 8, 4, 2, None]
        for k in range(5):
            skip = skips[skip_ratio[k]] if skip_ratio[k] else rgb_feat
            s = self.branches["semantic"][k](s, skip)
            n = self.branches["normal"][k](n, skip)
            h = self.branches["height"][k](h, skip, cross=torch.cat([s, n], dim=1))
        return {
            "height": self.heads["height"](h),
            "semantics": torch.softmax(self.heads["semantic"](s), dim=1),
            "normals": self.heads["normal"](n),
        }


class ConvBlock(nn.Sequential):
    def __init__(self, in_ch, out_ch):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.ReLU(inplace=True),
        )


class UpBlock(nn.Sequential):
    """Nearest x2 upsampling + conv, avoiding checkerboard artifacts."""

    def __init__(self, in_ch, out_ch):
        super().__init__(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.ReLU(inplace=True),
        )


class RefinerDecoderStage(nn.Module):
    def __init__(self, in_ch, width, skip_ch):
        super().__init__()
        self.up = UpBlock(in_ch, width)
        self.cat = Cat()
        self.conv = ConvBlock(width + skip_ch, width)

    def forward(self, x, skip):
        x = self.up(x)
        x = self.cat(x, skip)
        return self.conv(x)


class RefinerNet(nn.Module):
    """U-Net denoiser: five conv blocks with pooling, four upsampling stages
    with skips.

    The conv stack estimates the noise left in the incoming height channel;
    the refined height is that channel minus the estimated noise, so an
    untrained refiner already passes its input through unchanged.
    """

    def __init__(self, spec: RefinerSpec):
        super().__init__()
        self.spec = spec
        enc_w = spec.encoder_widths
        dec_w = spec.decoder_widths
        blocks = []
        prev = spec.input_channels
        for w in enc_w:
            blocks.append(ConvBlock(prev, w))
            prev = w
        self.enc = nn.ModuleList(blocks)
        self.pool = nn.MaxPool2d(2)
        stages = []
        prev = enc_w[4]
        for i, w in enumerate(dec_w):
            stages.append(RefinerDecoderStage(prev, w, skip_ch=enc_w[3 - i]))
            prev = w
        self.dec = nn.ModuleList(stages)
        self.out_conv = nn.Conv2d(dec_w[3], 1, 1)

    def forward(self, x):
        if x.shape[1] != self.spec.input_channels:
            raise ValueError(
                f"refiner expects {self.spec.input_channels} channels "
                f"(RGB, height, {self.spec.num_classes} class probabilities, normals), "
                f"got {x.shape[1]}"
            )
        if x.shape[-2] % 16 or x.shape[-1] % 16:
            raise ValueError(f"input {tuple(x.shape)} not divisible by 16")
        height_in = x[:, 3:4]
        feats = []
        for i, block in enumerate(self.enc):
            x = block(x)
            if i < 4:
                feats.append(x)
                x = self.pool(x)
        for i, stage in enumerate(self.dec):
            x = stage(x, feats[3 - i])
        return height_in - self.out_conv(x)


def build_multitask(spec: MultiTaskSpec, seed: int | None = None) -> MultiTaskNet:
    if seed is not None:
        torch.manual_seed(seed)
    return MultiTaskNet(spec)


def build_refiner(spec: RefinerSpec, seed: int | None = None) -> RefinerNet:
    if seed is not None:
        torch.manual_seed(seed)
    return RefinerNet(spec)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# --- numpy <-> torch batch plumbing ---------------------------------------

def to_batch_tensor(arr: np.ndarray) -> torch.Tensor:
    """(B,H,W,C) or (B,H,W) numpy -> NCHW float tensor."""
    a = np.asarray(arr, dtype=np.float32)
    if a.ndim == 3:
        a = a[:, :, :, None]
    return torch.from_numpy(np.ascontiguousarray(a.transpose(0, 3, 1, 2)))


def from_batch_tensor(t: torch.Tensor) -> np.ndarray:
    """NCHW tensor -> (B,H,W,C) numpy."""
    return t.detach().cpu().numpy().transpose(0, 2, 3, 1)


def enable_mc_dropout(model: nn.Module) -> None:
    """Put only the dropout layers in train mode (stochastic inference)."""
    for module in model.modules():
        if isinstance(module, (nn.Dropout, nn.Dropout2d)):
            module.train()


def forward_multitask(
    model: MultiTaskNet, rgb_batch: np.ndarray, stochastic_dropout: bool = False
) -> dict[str, np.ndarray]:
    """Inference forward over an (B,H,W,3) RGB batch in [0, 1].

    Returns height (B,H,W), semantics (B,H,W,C) rows summing to one, and
    normals (B,H,W,3) in the spec's encoding. Deterministic unless
    ``stochastic_dropout`` re-enables the dropout layers.
    """
    model.eval()
    if stochastic_dropout:
        enable_mc_dropout(model)
    with torch.no_grad():
        out = model(to_batch_tensor(rgb_batch))
    return {
        "height": from_batch_tensor(out["height"])[:, :, :, 0],
        "semantics": from_batch_tensor(out["semantics"]),
        "normals": from_batch_tensor(out["normals"]),
    }


def assemble_refiner_input(
    rgb: torch.Tensor,
    height: torch.Tensor,
    semantics: torch.Tensor,
    normals: torch.Tensor,
    mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Fixed channel order [RGB(3), height(1), class probs(C), normals(3)].

    ``mask`` is an optional per-channel 0/1 vector (e.g. height-only
    ablation) multiplied onto the assembled stack.
    """
    if height.dim() == 3:
        height = height[:, None]
    z = torch.cat([rgb, height, semantics, normals], dim=1)
    if mask is not None:
        z = z * mask.to(z.dtype).view(1, -1, 1, 1)
    return z


def height_only_mask(num_classes: int) -> torch.Tensor:
    mask = torch.zeros(7 + num_classes)
    mask[3] = 1.0
    return mask


def forward_refiner(model: RefinerNet, concat_batch: np.ndarray) -> np.ndarray:
    """Refined heights (B,H,W) from an (B,H,W,7+C) assembled batch."""
    model.eval()
    with torch.no_grad():
        out = model(to_batch_tensor(concat_batch))
    return from_batch_tensor(out)[:, :, :, 0]


def trace_shapes(
    model: nn.Module, input_hw: tuple[int, int], in_channels: int
) -> dict[str, tuple[int, int, int]]:
    """Forward a zero batch and record every module's output as (H, W, C)."""
    shapes: dict[str, tuple[int, int, int]] = {}
    hooks = []

    def make_hook(name):
        def hook(_module, _inputs, output):
            if isinstance(output, torch.Tensor) and output.dim() == 4:
                _, c, h, w = output.shape
                shapes[name] = (h, w, c)

        return hook

    for name, module in model.named_modules():
        if name:
            hooks.append(module.register_forward_hook(make_hook(name)))
    try:
        model.eval()
        with torch.no_grad():
            model(torch.zeros(1, in_channels, input_hw[0], input_hw[1]))
    finally:
        for h in hooks:
            h.remove()
    return shapes


# --- checkpoints -----------------------------------------------------------

_SPEC_KINDS = {"multitask": MultiTaskSpec, "refiner": RefinerSpec}


def _spec_to_payload(spec) -> dict:
    if isinstance(spec, MultiTaskSpec):
        payload = asdict(spec)
        payload["normal_encoding"] = spec.normal_encoding.value
        return {"kind": "multitask", "spec": payload}
    if isinstance(spec, RefinerSpec):
        return {"kind": "refiner", "spec": asdict(spec)}
    raise TypeError(f"unknown spec type {type(spec).__name__}")


def _spec_from_payload(payload: dict):
    kind = payload["kind"]
    raw = dict(payload["spec"])
    if kind == "multitask":
        raw["normal_encoding"] = NormalEncoding(raw["normal_encoding"])
        raw["encoder"] = EncoderSpec(**raw["encoder"])
        raw["input_size"] = tuple(raw["input_size"])
        raw["stage_widths"] = tuple(raw["stage_widths"])
        return MultiTaskSpec(**raw)
    if kind == "refiner":
        raw["encoder_widths"] = tuple(raw["encoder_widths"])
        raw["decoder_widths"] = tuple(raw["decoder_widths"])
        return RefinerSpec(**raw)
    raise ValueError(f"unknown checkpoint kind {kind!r}")


def save_checkpoint(path: str | Path, model: nn.Module, extra: dict | None = None) -> None:
    """Self-describing archive: spec as JSON plus one array blob per parameter.

    Float tensors are stored as little-endian float32 npy entries; integer
    buffers keep their integer dtype.
    """
    payload = _spec_to_payload(model.spec)
    payload["extra"] = extra or {}
    with zipfile.ZipFile(Path(path), "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("spec.json", json.dumps(payload, indent=2, sort_keys=True))
        for name, tensor in model.state_dict().items():
            arr = tensor.detach().cpu().numpy()
            if np.issubdtype(arr.dtype, np.floating):
                arr = arr.astype("<f4")
            buf = _io.BytesIO()
            np.save(buf, arr)
            zf.writestr(f"params/{name}.npy", buf.getvalue())


def load_checkpoint(path: str | Path, expected_spec=None) -> tuple[nn.Module, dict]:
    """Rebuild a model from its checkpoint archive.

    Fails loudly when the archive's spec disagrees with ``expected_spec`` or
    its parameter set does not exactly match the rebuilt architecture.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    with zipfile.ZipFile(path) as zf:
        payload = json.loads(zf.read("spec.json"))
        spec = _spec_from_payload(payload)
        if expected_spec is not None and spec != expected_spec:
            raise ValueError(
                f"checkpoint spec mismatch:\n  stored:   {spec}\n  expected: {expected_spec}"
            )
        model = MultiTaskNet(spec) if payload["kind"] == "multitask" else RefinerNet(spec)
        state = {}
        for info in zf.namelist():
            if not info.startswith("params/"):
                continue
            name = info[len("params/") : -len(".npy")]
            arr = np.load(_io.BytesIO(zf.read(info)))
            state[name] = torch.from_numpy(arr.copy())
        missing = set(model.state_dict()) - set(state)
        unexpected = set(state) - set(model.state_dict())
        if missing or unexpected:
            raise ValueError(
                f"checkpoint parameters do not match architecture "
                f"(missing {sorted(missing)[:3]}, unexpected {sorted(unexpected)[:3]})"
            )
        model.load_state_dict(state, strict=True)
    return model, payload.get("extra", {})
