"""Frozen modified-stem ResNet encoder and multi-scale feature extraction.

The network layout and tensor names follow the image tower of the public
contrastive image-text ResNets (three-conv stem, average-pool downsampling,
anti-aliased bottlenecks), so converted checkpoints load without renaming.
Only the convolutional trunk is built; the attention-pool head is never
instantiated because every feature we need is captured before it.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors.torch import load_file, save_file

from .image import Image

# (blocks per stage, stem width); stem width is the base channel count C.
VARIANTS: dict[str, tuple[tuple[int, int, int, int], int]] = {
    "RN50": ((3, 4, 6, 3), 64),
    "RN101": ((3, 4, 23, 3), 64),
    "RN50x4": ((4, 6, 10, 6), 80),
    "RN50x16": ((6, 8, 18, 8), 96),
    "RN50x64": ((3, 15, 36, 10), 128),
}

# Per-channel statistics the published weights were trained with.
PIXEL_MEAN = (0.48145466, 0.4578275, 0.40821073)
PIXEL_STD = (0.26862954, 0.26130258, 0.27577711)

PAD_MULTIPLE = 32


class WeightFileError(ValueError):
    """Raised when a weight file does not match the expected tensor layout."""


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, inplanes: int, planes: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(inplanes, planes, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.relu1 = nn.ReLU(inplace=True)
        self.conv2 = nn.Conv2d(planes, planes, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.relu2 = nn.ReLU(inplace=True)
        # stride is realised by pooling after the 3x3 conv, not by a strided conv
        self.avgpool = nn.AvgPool2d(stride) if stride > 1 else nn.Identity()
        self.conv3 = nn.Conv2d(planes, planes * self.expansion, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(planes * self.expansion)
        self.relu3 = nn.ReLU(inplace=True)

        self.downsample = None
        if stride > 1 or inplanes != planes * self.expansion:
            self.downsample = nn.Sequential(OrderedDict([
                ("-1", nn.AvgPool2d(stride)),
                ("0", nn.Conv2d(inplanes, planes * self.expansion, 1, stride=1, bias=False)),
                ("1", nn.BatchNorm2d(planes * self.expansion)),
            ]))

    def forward(self, x):
        identity = x
        out = self.relu1(self.bn1(self.conv1(x)))
        out = self.relu2(self.bn2(self.conv2(out)))
        out = self.avgpool(out)
        out = self.bn3(self.conv3(out))
        if self.downsample is not None:
            identity = self.downsample(x)
        out = out + identity
        return self.relu3(out)


class ResNetTrunk(nn.Module):
    """Stem plus residual stages, returning the features before each pooling step."""

    def __init__(self, layers, width: int = 64, max_level: int = 4):
        super().__init__()
        if max_level not in (4, 5):
            raise ValueError(f"max_level must be 4 or 5, got {max_level}")
        self.max_level = max_level
        self.width = width
        self.conv1 = nn.Conv2d(3, width // 2, 3, stride=2, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(width // 2)
        self.relu1 = nn.ReLU(inplace=True)
        self.conv2 = nn.Conv2d(width // 2, width // 2, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(width // 2)
        self.relu2 = nn.ReLU(inplace=True)
        self.conv3 = nn.Conv2d(width // 2, width, 3, padding=1, bias=False)
        self.bn3 = nn.BatchNorm2d(width)
        self.relu3 = nn.ReLU(inplace=True)
        self.avgpool = nn.AvgPool2d(2)

        self._inplanes = width
        self.layer1 = self._make_layer(width, layers[0])
        self.layer2 = self._make_layer(width * 2, layers[1], stride=2)
        self.layer3 = self._make_layer(width * 4, layers[2], stride=2)
        if max_level == 5:
            self.layer4 = self._make_layer(width * 8, layers[3], stride=2)

    def _make_layer(self, planes, blocks, stride=1):
        layers = [Bottleneck(self._inplanes, planes, stride)]
        self._inplanes = planes * Bottleneck.expansion
        for _ in range(1, blocks):
            layers.append(Bottleneck(self._inplanes, planes))
        return nn.Sequential(*layers)

    def forward(self, x) -> list[torch.Tensor]:
        out = []
        x = self.relu1(self.bn1(self.conv1(x)))
        x = self.relu2(self.bn2(self.conv2(x)))
        x = self.relu3(self.bn3(self.conv3(x)))
        out.append(x)
        x = self.avgpool(x)
        x = self.layer1(x)
        out.append(x)
        x = self.layer2(x)
        out.append(x)
        x = self.layer3(x)
        out.append(x)
        if self.max_level == 5:
            x = self.layer4(x)
            out.append(x)
        return out


def resolve_variant(variant: str, layers=None, width: int | None = None):
    """Return ``(layers, width)`` for a named variant or a pluggable layout."""
    if variant in VARIANTS:
        return VARIANTS[variant]
    if variant == "pluggable":
        if layers is None or width is None:
            raise ValueError("pluggable variant needs explicit layers and width")
        return tuple(int(n) for n in layers), int(width)
    raise ValueError(f"unknown backbone variant {variant!r}; choose from "
                     f"{sorted(VARIANTS) + ['pluggable']}")


def variant_manifest(variant: str, max_level: int = 4, layers=None, width=None) -> dict[str, tuple[int, ...]]:
    """Expected tensor names and shapes for a variant truncated at ``max_level``."""
    trunk = ResNetTrunk(*resolve_variant(variant, layers, width), max_level=max_level)
    return {k: tuple(v.shape) for k, v in trunk.state_dict().items()
            if not k.endswith("num_batches_tracked")}


def _read_header(path: Path) -> tuple[dict, int]:
    raw = path.read_bytes()
    if len(raw) < 8:
        raise WeightFileError(f"{path}: file too short to hold a tensor header")
    (n,) = struct.unpack("<Q", raw[:8])
    if 8 + n > len(raw):
        raise WeightFileError(f"{path}: header length {n} exceeds file size {len(raw)}")
    header = json.loads(raw[8:8 + n])
    header.pop("__metadata__", None)
    return header, len(raw) - 8 - n


def check_weight_file(path: str | Path, manifest: dict[str, tuple[int, ...]]) -> None:
    """Validate names, shapes and byte extents against ``manifest``.

    Raises :class:`WeightFileError` naming the first offending tensor.
    """
    path = Path(path)
    header, payload = _read_header(path)
    for name, shape in manifest.items():
        if name not in header:
            raise WeightFileError(f"{path}: missing tensor {name!r}")
        entry = header[name]
        if tuple(entry["shape"]) != shape:
            raise WeightFileError(
                f"{path}: tensor {name!r} has shape {tuple(entry['shape'])}, expected {shape}")
    # extents of every stored tensor, including ones we will not use
    for name, entry in sorted(header.items(), key=lambda kv: kv[1]["data_offsets"][1]):
        end = entry["data_offsets"][1]
        if end > payload:
            raise WeightFileError(
                f"{path}: tensor {name!r} data truncated (needs bytes up to {end}, file holds {payload})")


def state_digest(state: dict[str, torch.Tensor]) -> str:
    """Hex SHA-256 over names, dtypes, shapes and raw bytes, in sorted-name order."""
    h = hashlib.sha256()
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


class FrozenEncoder(nn.Module):
    """An immutable ResNet trunk with input normalization.

    Parameters never require grad and batch norm always uses running
    statistics, whatever mode the enclosing model is put in.
    """

    def __init__(self, trunk: ResNetTrunk, variant: str, digest: str):
        super().__init__()
        self.trunk = trunk
        self.variant = variant
        self.digest = digest
        self.register_buffer("mean", torch.tensor(PIXEL_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(PIXEL_STD).view(1, 3, 1, 1), persistent=False)
        for p in self.trunk.parameters():
            p.requires_grad_(False)
        self.trunk.eval()

    def train(self, mode: bool = True):
        # frozen statistics regardless of the requested mode
        super().train(False)
        return self

    @property
    def max_level(self) -> int:
        return self.trunk.max_level

    @property
    def base_channels(self) -> int:
        return self.trunk.width

    def level_channels(self) -> dict[int, int]:
        c = self.base_channels
        return {i: c if i == 1 else c * 2 ** i for i in range(1, self.max_level + 1)}

    def weight_state(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.trunk.state_dict().items()
                if not k.endswith("num_batches_tracked")}

    def current_digest(self) -> str:
        return state_digest(self.weight_state())

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Features of a unit-range N x 3 x H x W batch; H, W divisible by 32."""
        if x.shape[-2] % PAD_MULTIPLE or x.shape[-1] % PAD_MULTIPLE:
            raise ValueError(f"spatial size {tuple(x.shape[-2:])} not divisible by {PAD_MULTIPLE}; pad first")
        return self.trunk((x - self.mean) / self.std)


def load_encoder(weight_path: str | Path, variant: str = "RN50", max_level: int = 4,
                 layers=None, width=None) -> FrozenEncoder:
    """Load and verify a named-tensor (safetensors) weight file.

    Tensors beyond ``max_level`` (stage 4, attention pool) may be present and
    are ignored.
    """
    path = Path(weight_path)
    if not path.is_file():
        raise FileNotFoundError(f"weight file not found: {path}")
    layers, width = resolve_variant(variant, layers, width)
    manifest = variant_manifest("pluggable", max_level, layers, width)
    check_weight_file(path, manifest)
    tensors = load_file(str(path))
    state = {k: tensors[k].float() for k in manifest}
    trunk = ResNetTrunk(layers, width, max_level)
    trunk.load_state_dict(state, strict=False)
    return FrozenEncoder(trunk, variant, state_digest(state))


def save_encoder_weights(trunk_or_state, path: str | Path) -> str:
    """Write trunk weights (float32) to ``path``; returns the weight digest."""
    state = trunk_or_state.state_dict() if isinstance(trunk_or_state, nn.Module) else trunk_or_state
    state = {k: v.detach().float().contiguous() for k, v in state.items()
             if not k.endswith("num_batches_tracked")}
    save_file(state, str(path))
    return state_digest(state)


def random_encoder_weights(path: str | Path, variant: str = "RN50", seed: int = 0,
                           max_level: int = 5, layers=None, width=None) -> str:
    """Write a seeded randomly initialised trunk; stands in for pretrained weights."""
    torch.manual_seed(seed)
    trunk = ResNetTrunk(*resolve_variant(variant, layers, width), max_level=max_level)
    for m in trunk.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
    # scale residual branches down so activations stay bounded through deep stages
    for m in trunk.modules():
        if isinstance(m, Bottleneck):
            nn.init.constant_(m.bn3.weight, 0.2)
    return save_encoder_weights(trunk, path)


def import_clip_checkpoint(src: str | Path, dst: str | Path) -> str:
    """Convert a published image-text ResNet checkpoint to a trunk weight file.

    Accepts either a TorchScript archive or a pickled state dict. Keys under
    ``visual.`` are kept (prefix stripped); the attention pool is dropped.
    """
    src = str(src)
    try:
        state = torch.jit.load(src, map_location="cpu").state_dict()
    except RuntimeError:
        state = torch.load(src, map_location="cpu", weights_only=True)
        if "state_dict" in state:
            state = state["state_dict"]
    if any(k.startswith("visual.") for k in state):
        state = {k[len("visual."):]: v for k, v in state.items() if k.startswith("visual.")}
    state = {k: v for k, v in state.items() if not k.startswith("attnpool.")}
    return save_encoder_weights(state, dst)


@dataclass
class FeaturePyramid:
    """Feature maps keyed by level; each is an N x C x h x w tensor."""

    levels: dict[int, torch.Tensor]
    base_channels: int

    def hwc_shape(self, level: int) -> tuple[int, int, int]:
        _, c, h, w = self.levels[level].shape
        return h, w, c

    def numpy(self, level: int, index: int = 0) -> np.ndarray:
        """Level ``level`` of batch item ``index`` as an h x w x C float64 array."""
        return self.levels[level][index].detach().cpu().double().numpy().transpose(1, 2, 0)


def pad_to_multiple(x: torch.Tensor, multiple: int = PAD_MULTIPLE) -> tuple[torch.Tensor, tuple[int, int]]:
    """Reflect-pad the bottom/right edges so H and W are multiples of ``multiple``."""
    h, w = x.shape[-2:]
    ph, pw = -h % multiple, -w % multiple
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="reflect")
    return x, (h, w)


def extract_features(enc: FrozenEncoder, img: Image | torch.Tensor, max_level: int = 4) -> FeaturePyramid:
    """Extract F^1..F^max_level for a 3-channel image.

    Inputs not divisible by 32 are reflect-padded and each level cropped back
    to ceil(H / 2^i) x ceil(W / 2^i).
    """
    if max_level not in (4, 5):
        raise ValueError(f"max_level must be 4 or 5, got {max_level}")
    if max_level > enc.max_level:
        raise ValueError(f"encoder was loaded up to level {enc.max_level}, {max_level} requested")
    x = img.to_tensor() if isinstance(img, Image) else img
    if x.shape[1] != 3:
        raise ValueError(f"extract_features needs 3 channels, got {x.shape[1]}; apply a channel adapter first")
    if not torch.isfinite(x).all():
        raise ValueError("input contains non-finite values")
    if min(x.shape[-2:]) < PAD_MULTIPLE:
        raise ValueError(f"input must be at least {PAD_MULTIPLE} x {PAD_MULTIPLE}")
    xp, (h, w) = pad_to_multiple(x)
    feats = enc(xp)[:max_level]
    levels = {}
    for i, f in enumerate(feats, start=1):
        s = 2 ** i
        levels[i] = f[..., :-(-h // s), :-(-w // s)]
    return FeaturePyramid(levels, enc.base_channels)


class ChannelAdapter(nn.Module):
    """Learnable 1x1 conv mapping a single-channel image to three channels.

    Initialised to replicate the input into every output channel.
    """

    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(1, 3, 1)
        with torch.no_grad():
            self.conv.weight.fill_(1.0)
            self.conv.bias.zero_()

    def forward(self, x):
        if x.shape[1] != 1:
            raise ValueError(f"channel adapter expects 1 channel, got {x.shape[1]}")
        return self.conv(x)


def adapt_channels(adapter: ChannelAdapter, img: Image) -> Image:
    if img.channels != 1:
        raise ValueError(f"adapt_channels expects a 1-channel image, got {img.channels}")
    with torch.no_grad():
        out = adapter(img.to_tensor())
    return Image.from_tensor(out)
