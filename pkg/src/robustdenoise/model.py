"""Asymmetric denoiser: frozen encoder features into a learnable conv decoder."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors import safe_open
from safetensors.torch import save_file

from .backbone import (ChannelAdapter, FeaturePyramid, FrozenEncoder, pad_to_multiple)
from .image import Image

UPSAMPLE_MODES = ("bilinear", "nearest")


@dataclass
class DenoiserConfig:
    backbone_variant: str = "RN50"
    use_f5: bool = False
    inject_noisy_input: bool = True
    pfa_gamma: float = 0.025
    # outputs of the blocks fed by F4, F3, F2 and F1; the last also sizes the full-resolution block
    decoder_widths: tuple[int, ...] = (512, 256, 128, 64)
    upsample_mode: str = "bilinear"
    channels_in: int = 3
    backbone_layers: tuple[int, ...] | None = None
    backbone_width: int | None = None

    def __post_init__(self):
        self.decoder_widths = tuple(int(w) for w in self.decoder_widths)
        if self.backbone_layers is not None:
            self.backbone_layers = tuple(int(n) for n in self.backbone_layers)
        if self.pfa_gamma < 0:
            raise ValueError(f"pfa_gamma must be >= 0, got {self.pfa_gamma}")
        if len(self.decoder_widths) != 4 or min(self.decoder_widths) < 1:
            raise ValueError(f"decoder_widths needs 4 positive entries, got {self.decoder_widths}")
        if self.upsample_mode not in UPSAMPLE_MODES:
            raise ValueError(f"upsample_mode must be one of {UPSAMPLE_MODES}, got {self.upsample_mode!r}")
        if self.channels_in not in (1, 3):
            raise ValueError(f"channels_in must be 1 or 3, got {self.channels_in}")

    @property
    def max_level(self) -> int:
        return 5 if self.use_f5 else 4

    def to_record(self) -> dict:
        return asdict(self)

    @classmethod
    def from_record(cls, record: dict) -> "DenoiserConfig":
        return cls(**record)


class ConvBlock(nn.Sequential):
    """Conv3x3-ReLU-Conv3x3-ReLU."""

    def __init__(self, cin: int, cout: int):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.ReLU(inplace=True),
        )


class Decoder(nn.Module):
    def __init__(self, level_channels: dict[int, int], cfg: DenoiserConfig):
        super().__init__()
        c = level_channels
        w4, w3, w2, w1 = cfg.decoder_widths
        self.use_f5 = cfg.use_f5
        self.inject = cfg.inject_noisy_input
        self.mode = cfg.upsample_mode
        if self.use_f5:
            self.block5 = ConvBlock(c[5], c[4])
            self.block4 = ConvBlock(2 * c[4], w4)
        else:
            self.block4 = ConvBlock(c[4], w4)
        self.block3 = ConvBlock(w4 + c[3], w3)
        self.block2 = ConvBlock(w3 + c[2], w2)
        self.block1 = ConvBlock(w2 + c[1], w1)
        self.block0 = ConvBlock(w1 + (cfg.channels_in if self.inject else 0), w1)
        self.head = nn.Conv2d(w1, cfg.channels_in, 3, padding=1)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def _up(self, x):
        if self.mode == "bilinear":
            return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return F.interpolate(x, scale_factor=2, mode="nearest")

    def forward(self, feats: list[torch.Tensor], noisy: torch.Tensor | None) -> torch.Tensor:
        if self.use_f5:
            y = torch.cat([self._up(self.block5(feats[4])), feats[3]], dim=1)
        else:
            y = feats[3]
        y = self.block4(y)
        y = self.block3(torch.cat([self._up(y), feats[2]], dim=1))
        y = self.block2(torch.cat([self._up(y), feats[1]], dim=1))
        y = self.block1(torch.cat([self._up(y), feats[0]], dim=1))
        y = self._up(y)
        if self.inject:
            y = torch.cat([y, noisy], dim=1)
        return self.head(self.block0(y))


def _perturb(levels: list[torch.Tensor], gamma: float, generator: torch.Generator | None) -> list[torch.Tensor]:
    out = []
    for i, f in enumerate(levels, start=1):
        if i > 4 or gamma == 0:
            out.append(f)
            continue
        noise = torch.randn(f.shape, generator=generator, dtype=f.dtype, device=f.device)
        out.append(f * (1.0 + gamma * i * noise))
    return out


def apply_pfa(pyr: FeaturePyramid, gamma: float, seed: int) -> FeaturePyramid:
    """Scale each level i <= 4 element-wise by fresh N(1, (gamma * i)^2) samples."""
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    missing = [i for i in range(1, 5) if i not in pyr.levels]
    if missing:
        raise ValueError(f"pyramid lacks levels {missing}")
    g = torch.Generator().manual_seed(seed)
    keys = sorted(pyr.levels)
    perturbed = _perturb([pyr.levels[k] for k in keys], gamma, g)
    return FeaturePyramid(dict(zip(keys, perturbed)), pyr.base_channels)


class Denoiser(nn.Module):
    """Frozen encoder, optional 1x1 channel adapter and learnable decoder.

    No global residual: the head predicts the clean image directly.
    """

    def __init__(self, encoder: FrozenEncoder, cfg: DenoiserConfig):
        super().__init__()
        if cfg.backbone_variant != encoder.variant:
            raise ValueError(f"config expects backbone {cfg.backbone_variant!r}, encoder is {encoder.variant!r}")
        if encoder.max_level < cfg.max_level:
            raise ValueError("use_f5 needs an encoder loaded with max_level=5")
        self.cfg = cfg
        self.encoder = encoder
        self.adapter = ChannelAdapter() if cfg.channels_in == 1 else None
        self.decoder = Decoder(encoder.level_channels(), cfg)

    def learnable_parameters(self):
        yield from self.decoder.parameters()
        if self.adapter is not None:
            yield from self.adapter.parameters()

    def learnable_state(self) -> dict[str, torch.Tensor]:
        state = {f"decoder.{k}": v for k, v in self.decoder.state_dict().items()}
        if self.adapter is not None:
            state.update({f"adapter.{k}": v for k, v in self.adapter.state_dict().items()})
        return state

    def load_learnable_state(self, state: dict[str, torch.Tensor]) -> None:
        expected = set(self.learnable_state())
        if set(state) != expected:
            raise ValueError(f"checkpoint tensors differ from model: missing {sorted(expected - set(state))}, "
                             f"unexpected {sorted(set(state) - expected)}")
        self.decoder.load_state_dict({k[8:]: v for k, v in state.items() if k.startswith("decoder.")})
        if self.adapter is not None:
            self.adapter.load_state_dict({k[8:]: v for k, v in state.items() if k.startswith("adapter.")})

    def forward(self, noisy: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
        """Denoise a unit-range N x C x H x W batch.

        In training mode with ``pfa_gamma > 0`` the features are perturbed
        using ``generator``; evaluation mode is deterministic.
        """
        if noisy.dim() != 4 or noisy.shape[1] != self.cfg.channels_in:
            raise ValueError(f"expected N x {self.cfg.channels_in} x H x W input, got {tuple(noisy.shape)}")
        x, (h, w) = pad_to_multiple(noisy)
        if self.adapter is not None:
            feats = self.encoder(self.adapter(x))
        else:
            # nothing upstream of the encoder learns, so skip its autograd graph
            with torch.no_grad():
                feats = self.encoder(x)
        feats = feats[:self.cfg.max_level]
        if self.training and self.cfg.pfa_gamma > 0:
            feats = _perturb(feats, self.cfg.pfa_gamma, generator)
        out = self.decoder(feats, x)
        return out[..., :h, :w]


def denoise_image(model: Denoiser, noisy: Image, seed: int | None = None) -> Image:
    """Denoise one :class:`Image`; returns a unit-range image of the same shape."""
    if noisy.channels != model.cfg.channels_in:
        hint = " (enable the 1x1 channel adapter with channels_in = 1)" if noisy.channels == 1 else ""
        raise ValueError(f"model expects {model.cfg.channels_in} channel(s), image has {noisy.channels}{hint}")
    g = torch.Generator().manual_seed(seed) if seed is not None else None
    x = noisy.to_tensor().to(next(model.decoder.parameters()).dtype)
    with torch.no_grad():
        y = model(x, generator=g)
    return Image.from_tensor(y)


def count_parameters(model: Denoiser) -> tuple[int, int]:
    """Return ``(frozen, learnable)`` parameter counts.

    Batch-norm running statistics are buffers and are not counted.
    """
    frozen = sum(p.numel() for p in model.encoder.parameters())
    learnable = sum(p.numel() for p in model.learnable_parameters())
    return frozen, learnable


def save_checkpoint(path: str | Path, model: Denoiser, iteration: int = 0, seed: int = 0,
                    extra: dict | None = None) -> str:
    """Write learnable tensors plus a config record; returns the file's SHA-256."""
    # a single key: safetensors does not keep metadata key order, which would break byte-identical reruns
    record = {"config": model.cfg.to_record(), "iteration": int(iteration), "seed": int(seed),
              "encoder_digest": model.encoder.digest, "extra": extra or {}}
    meta = {"denoiser": json.dumps(record, sort_keys=True)}
    state = {k: v.detach().contiguous().clone() for k, v in model.learnable_state().items()}
    save_file(state, str(path), metadata=meta)
    return file_digest(path)


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class CheckpointInfo:
    config: DenoiserConfig
    iteration: int
    seed: int
    encoder_digest: str
    extra: dict = field(default_factory=dict)


def read_checkpoint(path: str | Path) -> tuple[CheckpointInfo, dict[str, torch.Tensor]]:
    with safe_open(str(path), framework="pt") as f:
        meta = f.metadata() or {}
        state = {k: f.get_tensor(k) for k in f.keys()}
    if "denoiser" not in meta:
        raise ValueError(f"{path}: not a denoiser checkpoint (no config record)")
    rec = json.loads(meta["denoiser"])
    info = CheckpointInfo(
        config=DenoiserConfig.from_record(rec["config"]),
        iteration=int(rec["iteration"]),
        seed=int(rec["seed"]),
        encoder_digest=rec["encoder_digest"],
        extra=rec.get("extra", {}),
    )
    return info, state


def load_checkpoint(path: str | Path, encoder: FrozenEncoder, strict_digest: bool = True) -> tuple[Denoiser, CheckpointInfo]:
    """Rebuild a denoiser around ``encoder`` and restore its learnable tensors."""
    info, state = read_checkpoint(path)
    if strict_digest and info.encoder_digest and info.encoder_digest != encoder.digest:
        raise ValueError(f"{path}: checkpoint was trained with encoder {info.encoder_digest[:12]}..., "
                         f"got {encoder.digest[:12]}...")
    model = Denoiser(encoder, info.config)
    model.load_learnable_state(state)
    model.eval()
    return model, info
