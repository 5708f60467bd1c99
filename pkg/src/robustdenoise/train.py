"""Supervised single-noise-level training of the decoder with an L1 objective."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from .data import ImageDataset
from .image import Image
from .model import Denoiser, file_digest, load_checkpoint, save_checkpoint
from .noise import NoiseSpec, derive_seed, rng_for

log = logging.getLogger(__name__)

# sub-stream tags for derive_seed
_CROP_STREAM = 1
_PFA_STREAM = 2


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 300_000
    batch_size: int = 16
    patch_size: int = 128
    lr_init: float = 3e-4
    lr_final: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    train_noise: NoiseSpec = field(default_factory=lambda: NoiseSpec("gaussian", {"sigma": 15}))
    seed: int = 0
    augment: bool = True
    checkpoint_every: int = 10_000
    log_every: int = 100

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError(f"iterations must be > 0, got {self.iterations}")
        if self.batch_size <= 0:
            raise ValueError(f"batch_size must be > 0, got {self.batch_size}")
        if self.patch_size <= 0 or self.patch_size % 32:
            raise ValueError(f"patch_size must be a positive multiple of 32, got {self.patch_size}")
        if not self.lr_init >= self.lr_final > 0:
            raise ValueError(f"need lr_init >= lr_final > 0, got {self.lr_init}, {self.lr_final}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.checkpoint_every <= 0 or self.log_every <= 0:
            raise ValueError("checkpoint_every and log_every must be > 0")

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["train_noise"] = self.train_noise.to_record()
        return rec


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Cosine annealing from ``lr_init`` at 0 to ``lr_final`` at ``cfg.iterations``."""
    if not 0 <= iteration <= cfg.iterations:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.iterations}]")
    cos = (1 + math.cos(math.pi * iteration / cfg.iterations)) / 2
    return cfg.lr_final + (cfg.lr_init - cfg.lr_final) * cos


def dihedral(arr: np.ndarray, k: int) -> np.ndarray:
    """Apply symmetry ``k`` in 0..7 of the square to an H x W x C array."""
    if k >= 4:
        arr = arr[:, ::-1]
    return np.rot90(arr, k % 4, axes=(0, 1))


class Batch(NamedTuple):
    clean: torch.Tensor
    noisy: torch.Tensor
    transforms: list[int]


def _to_batch_tensor(arrs: list[np.ndarray]) -> torch.Tensor:
    stacked = np.stack(arrs).transpose(0, 3, 1, 2).astype(np.float32)
    return torch.from_numpy(np.ascontiguousarray(stacked))


def sample_batch(dataset: ImageDataset, cfg: TrainConfig, rng: np.random.Generator,
                 iteration: int = 0) -> Batch:
    """Random crops with dihedral augmentation, corrupted online.

    Each sample's noise seed is derived from ``(cfg.seed, iteration, index)``.
    Returns unit-range N x C x P x P tensors.
    """
    p = cfg.patch_size
    clean, noisy, transforms = [], [], []
    for n in range(cfg.batch_size):
        img = dataset[int(rng.integers(len(dataset)))]
        h, w, _ = img.shape
        if h < p or w < p:
            raise ValueError(f"image of size {h}x{w} is smaller than patch size {p}")
        top, left = int(rng.integers(h - p + 1)), int(rng.integers(w - p + 1))
        patch = img.data[top:top + p, left:left + p]
        k = int(rng.integers(8)) if cfg.augment else 0
        patch = np.ascontiguousarray(dihedral(patch, k))
        corrupted = cfg.train_noise.apply(Image(patch, "unit"), seed=derive_seed(cfg.seed, iteration, n))
        clean.append(patch)
        noisy.append(corrupted.data)
        transforms.append(k)
    return Batch(_to_batch_tensor(clean), _to_batch_tensor(noisy), transforms)


def l1_loss(denoised: torch.Tensor, clean: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over all elements."""
    if denoised.shape != clean.shape:
        raise ValueError(f"shape mismatch: {tuple(denoised.shape)} vs {tuple(clean.shape)}")
    return (denoised - clean).abs().mean()


@dataclass
class TrainResult:
    checkpoint: Path | None
    digest: str | None
    losses: list[float]
    model: Denoiser

    def running_loss(self, window: int, at_start: bool = False) -> float:
        chunk = self.losses[:window] if at_start else self.losses[-window:]
        return float(np.mean(chunk))


def make_optimizer(model: Denoiser, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(list(model.learnable_parameters()), lr=cfg.lr_init,
                             betas=(cfg.beta1, cfg.beta2), eps=cfg.eps,
                             weight_decay=cfg.weight_decay)


def _save(out_dir: Path, model: Denoiser, opt, cfg: TrainConfig, iteration: int, losses: list[float]) -> Path:
    ckpt = out_dir / f"checkpoint_{iteration:07d}.safetensors"
    save_checkpoint(ckpt, model, iteration, cfg.seed, extra={"train": cfg.to_record()})
    torch.save({"iteration": iteration, "optimizer": opt.state_dict(), "losses": losses},
               out_dir / f"state_{iteration:07d}.pt")
    return ckpt


def train(model: Denoiser, dataset: ImageDataset, cfg: TrainConfig, out_dir: str | Path | None = None,
          resume_from: str | Path | None = None) -> TrainResult:
    """Optimize the decoder (and adapter) on online-synthesized pairs.

    ``resume_from`` names a checkpoint written by a previous call; its
    sibling ``state_*.pt`` restores optimizer moments and the loss history.
    With ``out_dir`` set, checkpoints are written every
    ``cfg.checkpoint_every`` iterations and at the end, and a loss CSV
    (iteration, lr, loss) is appended every ``cfg.log_every`` iterations.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    opt = make_optimizer(model, cfg)
    start, losses = 0, []
    if resume_from is not None:
        resumed, info = load_checkpoint(resume_from, model.encoder)
        model.load_learnable_state(resumed.learnable_state())
        state = torch.load(Path(resume_from).with_name(f"state_{info.iteration:07d}.pt"), weights_only=False)
        opt.load_state_dict(state["optimizer"])
        start, losses = state["iteration"], list(state["losses"])

    digest_before = model.encoder.current_digest()
    log_path = out_dir / "loss_log.csv" if out_dir is not None else None
    if log_path is not None and start == 0:
        log_path.write_text("iteration,lr,loss\n")

    model.train()
    for it in range(start, cfg.iterations):
        lr = lr_at(it, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        batch_seed = derive_seed(cfg.seed, it, _CROP_STREAM)
        clean, noisy, _ = sample_batch(dataset, cfg, rng_for(batch_seed), it)
        clean, noisy = clean.to(_dtype(model)), noisy.to(_dtype(model))
        g = torch.Generator().manual_seed(derive_seed(cfg.seed, it, _PFA_STREAM) & (2 ** 63 - 1))
        loss = l1_loss(model(noisy, generator=g), clean)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at iteration {it} (batch seed {batch_seed})")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())

        done = it + 1
        if done % cfg.log_every == 0:
            running = float(np.mean(losses[-cfg.log_every:]))
            log.info("iter %d lr %.3e loss %.5f", done, lr, running)
            if log_path is not None:
                with log_path.open("a", newline="") as fh:
                    csv.writer(fh).writerow([done, f"{lr:.6e}", f"{running:.6f}"])
        if out_dir is not None and done % cfg.checkpoint_every == 0 and done != cfg.iterations:
            _save(out_dir, model, opt, cfg, done, losses)

    if model.encoder.current_digest() != digest_before:
        raise RuntimeError("encoder weights changed during training")
    model.eval()
    ckpt = digest = None
    if out_dir is not None:
        ckpt = _save(out_dir, model, opt, cfg, cfg.iterations, losses)
        final = out_dir / "final.safetensors"
        final.write_bytes(ckpt.read_bytes())
        ckpt, digest = final, file_digest(final)
    return TrainResult(ckpt, digest, losses, model)


def _dtype(model: Denoiser) -> torch.dtype:
    return next(model.decoder.parameters()).dtype
