"""Seeded synthesis of the corruption families used for training and OOD tests.

Every generator is a pure function of ``(image, parameters, seed)``. Random
numbers come from a Philox counter-based generator keyed by the seed, so a
draw never depends on global state or call order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .image import Image

# kind -> (parameter names with defaults, range convention)
KINDS: dict[str, tuple[dict[str, float | None], str]] = {
    "gaussian": ({"sigma": None}, "byte"),
    "spatial_gaussian": ({"sigma": None, "kernel_size": 5, "kernel_std": 1.0}, "byte"),
    "poisson": ({"alpha": None}, "unit"),
    "speckle": ({"var": None}, "unit"),
    "salt_pepper": ({"d": None}, "unit"),
    "poisson_gaussian": ({"sigma_s": None, "sigma_c": None}, "unit"),
}


def rng_for(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def derive_seed(*keys: int) -> int:
    """Mix integer keys into one 64-bit seed (order sensitive)."""
    state = np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]).generate_state(2, np.uint32)
    return int(state[0]) << 32 | int(state[1])


def _finish(img: Image, out: np.ndarray, clip: bool) -> Image:
    if clip:
        out = np.clip(out, 0.0, img.peak)
    return Image(out, img.range_tag)


def _require_unit(img: Image, name: str) -> None:
    if img.range_tag != "unit":
        raise ValueError(f"{name} noise is defined on unit-range images, got {img.range_tag!r}")


def add_gaussian(img: Image, sigma: float, seed: int, clip: bool = True) -> Image:
    """Additive i.i.d. Gaussian noise; ``sigma`` is in the image's range units."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    n = rng_for(seed).standard_normal(img.shape) * sigma
    return _finish(img, img.data + n, clip)


def gaussian_kernel_1d(size: int, std: float) -> np.ndarray:
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be a positive odd integer, got {size}")
    if size == 1:
        return np.ones(1)
    x = np.arange(size) - size // 2
    k = np.exp(-0.5 * (x / std) ** 2)
    return k / k.sum()


def correlated_field(shape: tuple[int, int, int], kernel_size: int, kernel_std: float,
                     rng: np.random.Generator) -> np.ndarray:
    """Unit-variance Gaussian field with separable Gaussian spatial correlation.

    White noise is drawn on a margin-extended grid and filtered in valid mode,
    so every output pixel has exactly the same marginal variance.
    """
    h, w, c = shape
    r = kernel_size // 2
    white = rng.standard_normal((h + 2 * r, w + 2 * r, c))
    k = gaussian_kernel_1d(kernel_size, kernel_std)
    field_ = correlate1d(white, k, axis=0, mode="constant")
    field_ = correlate1d(field_, k, axis=1, mode="constant")
    field_ = field_[r:r + h, r:r + w]
    # separable 2-D kernel: sum of squares factorises
    return field_ / np.sum(k ** 2)


def add_spatial_gaussian(img: Image, sigma: float, seed: int, kernel_size: int = 5,
                         kernel_std: float = 1.0, clip: bool = True) -> Image:
    """Low-pass filtered Gaussian noise rescaled to per-pixel std ``sigma``."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    m = correlated_field(img.shape, kernel_size, kernel_std, rng_for(seed)) * sigma
    return _finish(img, img.data + m, clip)


def photon_scale(alpha: float) -> float:
    """Photons per unit intensity; larger ``alpha`` means fewer photons."""
    return 10.0 ** (4.0 - alpha)


def add_poisson(img: Image, alpha: float, seed: int, clip: bool = True) -> Image:
    """Shot noise: ``Poisson(x * s) / s`` with ``s = 10 ** (4 - alpha)``."""
    _require_unit(img, "Poisson")
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    if np.any(img.data < 0):
        raise ValueError("Poisson noise needs non-negative intensities")
    s = photon_scale(alpha)
    out = rng_for(seed).poisson(img.data * s) / s
    return _finish(img, out, clip)


def add_speckle(img: Image, var: float, seed: int, clip: bool = True) -> Image:
    """Multiplicative noise ``x + x * n`` with ``n ~ N(0, var)``."""
    _require_unit(img, "speckle")
    if var < 0:
        raise ValueError(f"var must be >= 0, got {var}")
    n = rng_for(seed).standard_normal(img.shape) * np.sqrt(var)
    return _finish(img, img.data + img.data * n, clip)


def add_salt_pepper(img: Image, d: float, seed: int) -> Image:
    """Replace a fraction ``d`` of pixels (all channels jointly), half by 1 and half by 0."""
    _require_unit(img, "salt-and-pepper")
    if not 0.0 <= d <= 1.0:
        raise ValueError(f"d must lie in [0, 1], got {d}")
    u = rng_for(seed).random(img.shape[:2])
    out = img.data.copy()
    out[u < d / 2] = 1.0
    out[(u >= d / 2) & (u < d)] = 0.0
    return Image(out, img.range_tag)


def add_poisson_gaussian(img: Image, sigma_s: float, sigma_c: float, seed: int,
                         clip: bool = True) -> Image:
    """Heteroscedastic Gaussian noise with variance ``sigma_s**2 * x + sigma_c**2``."""
    _require_unit(img, "Poisson-Gaussian")
    if sigma_s < 0 or sigma_c < 0:
        raise ValueError(f"sigma_s and sigma_c must be >= 0, got {sigma_s}, {sigma_c}")
    std = np.sqrt(sigma_s ** 2 * np.clip(img.data, 0.0, None) + sigma_c ** 2)
    n = rng_for(seed).standard_normal(img.shape) * std
    return _finish(img, img.data + n, clip)


@dataclass(frozen=True)
class NoiseSpec:
    """One corruption: kind, its parameters, range convention and seed."""

    kind: str
    params: dict[str, float] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}; choose from {sorted(KINDS)}")
        defaults, _ = KINDS[self.kind]
        unknown = set(self.params) - set(defaults)
        if unknown:
            raise ValueError(f"{self.kind}: unknown parameter(s) {sorted(unknown)}; "
                             f"expected {sorted(defaults)}")
        full = {}
        for name, default in defaults.items():
            value = self.params.get(name, default)
            if value is None:
                raise ValueError(f"{self.kind}: missing parameter {name!r}")
            full[name] = float(value)
        if any(v < 0 for v in full.values()):
            raise ValueError(f"{self.kind}: parameters must be >= 0, got {full}")
        if self.kind == "salt_pepper" and full["d"] > 1:
            raise ValueError(f"salt_pepper: d must lie in [0, 1], got {full['d']}")
        if self.kind == "spatial_gaussian":
            full["kernel_size"] = int(full["kernel_size"])
        object.__setattr__(self, "params", full)

    @property
    def range_tag(self) -> str:
        return KINDS[self.kind][1]

    @property
    def label(self) -> str:
        shown = {k: v for k, v in self.params.items() if k not in ("kernel_size", "kernel_std")}
        return self.kind + "(" + ",".join(f"{k}={v:g}" for k, v in shown.items()) + ")"

    def with_seed(self, seed: int) -> "NoiseSpec":
        return NoiseSpec(self.kind, dict(self.params), seed)

    def apply(self, img: Image, seed: int | None = None) -> Image:
        """Corrupt ``img`` in this kind's range convention; returns ``img``'s range."""
        if self.is_identity():
            # skip the range round trip, which is not exact in floating point
            return img
        seed = self.seed if seed is None else seed
        x = img.to_range(self.range_tag)
        p = self.params
        if self.kind == "gaussian":
            y = add_gaussian(x, p["sigma"], seed)
        elif self.kind == "spatial_gaussian":
            y = add_spatial_gaussian(x, p["sigma"], seed, p["kernel_size"], p["kernel_std"])
        elif self.kind == "poisson":
            y = add_poisson(x, p["alpha"], seed)
        elif self.kind == "speckle":
            y = add_speckle(x, p["var"], seed)
        elif self.kind == "salt_pepper":
            y = add_salt_pepper(x, p["d"], seed)
        else:
            y = add_poisson_gaussian(x, p["sigma_s"], p["sigma_c"], seed)
        return y.to_range(img.range_tag)

    def is_identity(self) -> bool:
        if self.kind == "poisson":
            return False
        return all(v == 0 for k, v in self.params.items() if k not in ("kernel_size", "kernel_std"))

    def to_record(self) -> dict[str, str | float | int]:
        return {"kind": self.kind, **self.params, "range_tag": self.range_tag, "seed": self.seed}

    @classmethod
    def from_record(cls, record: dict) -> "NoiseSpec":
        record = dict(record)
        kind = record.pop("kind")
        seed = int(record.pop("seed", 0))
        tag = record.pop("range_tag", None)
        if tag is not None and tag != KINDS.get(kind, (None, tag))[1]:
            raise ValueError(f"{kind}: range_tag must be {KINDS[kind][1]!r}, got {tag!r}")
        return cls(kind, {k: float(v) for k, v in record.items()}, seed)

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "NoiseSpec":
        """Parse ``kind:name=value,name=value`` (e.g. ``gaussian:sigma=25``)."""
        kind, _, rest = text.strip().partition(":")
        params = {}
        for item in filter(None, (s.strip() for s in rest.split(","))):
            name, eq, value = item.partition("=")
            if not eq:
                raise ValueError(f"malformed noise parameter {item!r} in {text!r}")
            params[name.strip()] = float(value)
        return cls(kind.strip(), params, seed)
