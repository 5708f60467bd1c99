"""Clean/noisy feature similarity studies on a frozen encoder."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import FrozenEncoder, extract_features
from .image import Image
from .noise import NoiseSpec, derive_seed, rng_for


def _as_matrix(x) -> np.ndarray:
    """Feature map (h x w x c, or already positions x channels) as float64 rows=positions."""
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x.reshape(-1, x.shape[-1])
    if x.ndim == 2:
        return x
    raise ValueError(f"expected a 2-D or 3-D feature map, got shape {x.shape}")


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two fully flattened feature maps."""
    a = np.asarray(a.detach().cpu() if isinstance(a, torch.Tensor) else a, dtype=np.float64)
    b = np.asarray(b.detach().cpu() if isinstance(b, torch.Tensor) else b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity is undefined for a zero-norm input")
    if np.array_equal(a, b):
        return 1.0
    return float(np.clip(np.dot(a.ravel(), b.ravel()) / (na * nb), -1.0, 1.0))


def cka_similarity(a, b) -> float:
    """Linear CKA with spatial positions as samples and channels as features.

    Channel counts may differ; the number of positions must match.
    """
    x, y = _as_matrix(a), _as_matrix(b)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"position counts differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape == y.shape and np.array_equal(x, y):
        if not np.any(x - x.mean(axis=0)):
            raise ValueError("CKA is undefined for a constant feature map")
        return 1.0
    x = x - x.mean(axis=0)
    y = y - y.mean(axis=0)
    xx = np.linalg.norm(x.T @ x)
    yy = np.linalg.norm(y.T @ y)
    if xx == 0 or yy == 0:
        raise ValueError("CKA is undefined for a constant feature map")
    cross = np.linalg.norm(y.T @ x) ** 2
    return float(np.clip(cross / (xx * yy), 0.0, 1.0))


def gaussian_unit(sigma: float, seed: int = 0) -> NoiseSpec:
    """Gaussian spec for a standard deviation given on the [0, 1] scale."""
    return NoiseSpec("gaussian", {"sigma": sigma * 255.0}, seed)


@dataclass
class SimilarityReport:
    variant: str
    image_id: str
    rows: list[dict] = field(default_factory=list)

    FIELDS = ("variant", "image", "kind", "level", "scale", "cosine", "cka")

    def lookup(self, level: str, scale: int) -> dict:
        for r in self.rows:
            if r["level"] == level and r["scale"] == scale:
                return r
        raise KeyError((level, scale))

    def cosines(self, level: str) -> list[float]:
        return [r["cosine"] for r in sorted((r for r in self.rows if r["level"] == level),
                                            key=lambda r: r["scale"])]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.FIELDS)
            w.writeheader()
            for r in self.rows:
                w.writerow({**r, "cosine": f"{r['cosine']:.10f}", "cka": f"{r['cka']:.10f}"})


def similarity_sweep(enc: FrozenEncoder, clean: Image, specs: list[NoiseSpec], seeds=(0, 1, 2),
                     image_id: str = "image", max_level: int = 4) -> SimilarityReport:
    """Per-scale cosine and CKA between clean and corrupted features, seed-averaged."""
    if not specs:
        raise ValueError("need at least one noise spec")
    if not seeds:
        raise ValueError("need at least one seed")
    clean = clean.to_range("unit")
    ref = extract_features(enc, clean, max_level)
    report = SimilarityReport(enc.variant, image_id)
    for spec in specs:
        acc = {i: [0.0, 0.0] for i in range(1, max_level + 1)}
        for s in seeds:
            noisy = spec.apply(clean, seed=derive_seed(spec.seed, s))
            pyr = extract_features(enc, noisy, max_level)
            for i in acc:
                fc, fn = ref.numpy(i), pyr.numpy(i)
                acc[i][0] += cosine_similarity(fc, fn)
                acc[i][1] += cka_similarity(fc, fn)
        for i, (cos, cka) in acc.items():
            report.rows.append({"variant": enc.variant, "image": image_id, "kind": spec.kind,
                                "level": spec.label, "scale": i,
                                "cosine": cos / len(seeds), "cka": cka / len(seeds)})
    return report


def _center_crop(img: Image, h: int, w: int) -> Image:
    H, W, _ = img.shape
    top, left = (H - h) // 2, (W - w) // 2
    return Image(img.data[top:top + h, left:left + w], img.range_tag)


def _project(vec: np.ndarray, dim: int, seed: int, chunk: int = 1 << 16) -> np.ndarray:
    """Gaussian random projection generated chunk-wise from ``seed``."""
    out = np.zeros(dim)
    for j, start in enumerate(range(0, vec.size, chunk)):
        part = vec[start:start + chunk]
        m = rng_for(derive_seed(seed, j)).standard_normal((part.size, dim))
        out += part @ m
    return out / np.sqrt(dim)


@dataclass
class SeparationResult:
    ratios: dict[int, float]
    inter: dict[int, float]
    intra: dict[int, float]


def content_separation(enc: FrozenEncoder, images: list[Image], spec: NoiseSpec, draws: int = 20,
                       seed: int = 0, max_level: int = 4, embed_csv: str | Path | None = None,
                       image_ids: list[str] | None = None, projection_dim: int = 64) -> SeparationResult:
    """Inter-image over intra-image mean cosine distance of noisy features, per scale.

    Images are centre-cropped to a common size (a multiple of 32). If
    ``embed_csv`` is given, a seeded random projection of every flattened
    feature is written as (image, draw, scale, p0..pK).
    """
    if len(images) < 2:
        raise ValueError("content separation needs at least two images")
    if draws < 2:
        raise ValueError("content separation needs at least two noise draws per image")
    image_ids = image_ids or [f"image{k}" for k in range(len(images))]
    h = min(im.shape[0] for im in images) // 32 * 32
    w = min(im.shape[1] for im in images) // 32 * 32
    crops = [_center_crop(im.to_range("unit"), h, w) for im in images]

    # unit-normalised flattened features: level -> (images * draws) x D
    vecs: dict[int, list[np.ndarray]] = {i: [] for i in range(1, max_level + 1)}
    rows = []
    for m, img in enumerate(crops):
        for d in range(draws):
            noisy = spec.apply(img, seed=derive_seed(seed, m, d))
            pyr = extract_features(enc, noisy, max_level)
            for i in vecs:
                v = pyr.levels[i][0].detach().double().numpy().ravel()
                if embed_csv is not None:
                    p = _project(v, projection_dim, derive_seed(seed, 7919, i))
                    rows.append([image_ids[m], d, i] + [f"{x:.8g}" for x in p])
                n = np.linalg.norm(v)
                if n == 0:
                    raise ValueError(f"zero feature vector at scale {i}")
                vecs[i].append((v / n).astype(np.float32))

    labels = np.repeat(np.arange(len(crops)), draws)
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(labels.size, dtype=bool)
    ratios, inter, intra = {}, {}, {}
    for i, vs in vecs.items():
        mat = np.stack(vs).astype(np.float64)
        dist = 1.0 - mat @ mat.T
        intra[i] = float(dist[same & off_diag].mean())
        inter[i] = float(dist[~same].mean())
        ratios[i] = inter[i] / intra[i] if intra[i] > 0 else float("inf")
        vecs[i] = []

    if embed_csv is not None:
        with open(embed_csv, "w", newline="") as fh:
            w_ = csv.writer(fh)
            w_.writerow(["image", "draw", "scale"] + [f"p{k}" for k in range(projection_dim)])
            w_.writerows(rows)
    return SeparationResult(ratios, inter, intra)
