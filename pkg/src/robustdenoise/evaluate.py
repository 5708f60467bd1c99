"""PSNR / SSIM and the out-of-distribution benchmark harness."""

from __future__ import annotations

import csv
import logging
import math
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.ndimage import correlate1d

from .data import Manifest, load_images
from .image import Image
from .noise import NoiseSpec, derive_seed, gaussian_kernel_1d

log = logging.getLogger(__name__)

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _arr(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Image) else x, dtype=np.float64)


def psnr(a, b, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)``; identical inputs give ``inf``."""
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError(f"peak must be > 0, got {peak}")
    sq = (a - b) ** 2
    # correctly rounded sum and the RMSE form keep round cases exact
    mse = math.fsum(sq.ravel()) / sq.size
    if mse == 0:
        return math.inf
    return 20.0 * math.log10(peak / math.sqrt(mse))


def _filter_valid(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    r = k.size // 2
    y = correlate1d(x, k, axis=0, mode="constant")
    y = correlate1d(y, k, axis=1, mode="constant")
    return y[r:x.shape[0] - r, r:x.shape[1] - r]


def ssim(a, b, data_range: float | None = None) -> float:
    """Mean single-scale SSIM, 11x11 Gaussian window (sigma 1.5), valid region.

    Multi-channel inputs are scored per channel and averaged. ``data_range``
    defaults to the images' range convention (1 or 255).
    """
    if data_range is None:
        data_range = a.peak if isinstance(a, Image) else 1.0
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if min(a.shape[:2]) < SSIM_WIN:
        raise ValueError(f"images must be at least {SSIM_WIN} x {SSIM_WIN}, got {a.shape[:2]}")
    k = gaussian_kernel_1d(SSIM_WIN, SSIM_SIGMA)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mx, my = _filter_valid(x, k), _filter_valid(y, k)
        sxx = _filter_valid(x * x, k) - mx * mx
        syy = _filter_valid(y * y, k) - my * my
        sxy = _filter_valid(x * y, k) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


@dataclass
class EvalRecord:
    dataset: str
    noise: NoiseSpec
    psnr: float
    ssim: float
    n_images: int
    n_skipped: int
    checkpoint: str

    @property
    def identity(self) -> bool:
        return math.isinf(self.psnr)

    def to_row(self) -> dict:
        return {"dataset": self.dataset, "noise": self.noise.label, "kind": self.noise.kind,
                "psnr": "inf" if self.identity else f"{self.psnr:.6f}", "ssim": f"{self.ssim:.6f}",
                "n_images": self.n_images, "n_skipped": self.n_skipped, "checkpoint": self.checkpoint}


CSV_FIELDS = ("dataset", "noise", "kind", "psnr", "ssim", "n_images", "n_skipped", "checkpoint")

Denoise = Callable[[Image], Image]


def passthrough(img: Image) -> Image:
    return img


def _stable_hash(text: str) -> int:
    return zlib.crc32(text.encode())


def corruption_seed(seed: int, dataset_id: str, spec: NoiseSpec, index: int) -> int:
    """Noise seed for one benchmark image; independent of machine and iteration order."""
    return derive_seed(seed, _stable_hash(dataset_id), _stable_hash(spec.label), spec.seed, index)


def run_benchmark(denoise: Denoise, manifests: list[Manifest], specs: list[NoiseSpec], seed: int = 0,
                  checkpoint_id: str = "passthrough", channels: int = 3) -> list[EvalRecord]:
    """Corrupt, denoise and score every (dataset, spec) pair.

    Metrics are computed on the [0, 255] scale (peak 255) after clipping the
    denoiser output to the valid range. Unreadable images are skipped with a
    warning and counted.
    """
    records = []
    for manifest in manifests:
        if not manifest.paths:
            raise ValueError(f"dataset {manifest.dataset_id!r} is empty")
        images, skipped = load_images(manifest, channels, skip_unreadable=True)
        if not images:
            raise ValueError(f"dataset {manifest.dataset_id!r} has no readable images")
        for spec in specs:
            ps, ss = [], []
            for index, clean in images:
                noisy = spec.apply(clean, seed=corruption_seed(seed, manifest.dataset_id, spec, index))
                out = denoise(noisy).to_range("unit").clipped()
                ref, est = clean.to_range("byte"), out.to_range("byte")
                ps.append(psnr(ref, est, 255.0))
                ss.append(ssim(ref, est, 255.0))
            records.append(EvalRecord(manifest.dataset_id, spec, float(np.mean(ps)), float(np.mean(ss)),
                                      len(images), skipped, checkpoint_id))
    return records


def write_records_csv(records: list[EvalRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in records:
            w.writerow(r.to_row())


def format_table(records: list[EvalRecord], method: str = "Model") -> str:
    """Aligned text table: one row per (noise, dataset), PSNR/SSIM cell."""
    header = ("Noise", "Dataset", method)
    rows = [(r.noise.label, r.dataset, f"{'inf' if r.identity else f'{r.psnr:.2f}'}/{r.ssim:.3f}")
            for r in sorted(records, key=lambda r: (r.noise.label, r.dataset))]
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    line = "  ".join("-" * w for w in widths)
    out = ["  ".join(h.ljust(w) for h, w in zip(header, widths)), line]
    out += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows]
    return "\n".join(out) + "\n"
