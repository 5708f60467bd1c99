"""Dense image container and lossless image I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage

RANGE_PEAK = {"unit": 1.0, "byte": 255.0}


@dataclass(frozen=True)
class Image:
    """An H x W x C float64 array with an intensity-range convention.

    ``range_tag`` is ``"unit"`` for [0, 1] data and ``"byte"`` for [0, 255].
    """

    data: np.ndarray
    range_tag: str = "unit"

    def __post_init__(self):
        if self.range_tag not in RANGE_PEAK:
            raise ValueError(f"unknown range_tag {self.range_tag!r}; expected 'unit' or 'byte'")
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise ValueError(f"image must be H x W x C with C in {{1, 3}}, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("image contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def peak(self) -> float:
        return RANGE_PEAK[self.range_tag]

    def to_range(self, range_tag: str) -> "Image":
        if range_tag == self.range_tag:
            return self
        scale = RANGE_PEAK[range_tag] / RANGE_PEAK[self.range_tag]
        return Image(self.data * scale, range_tag)

    def clipped(self) -> "Image":
        return Image(np.clip(self.data, 0.0, self.peak), self.range_tag)

    def to_tensor(self) -> torch.Tensor:
        """Unit-range 1 x C x H x W float32 tensor."""
        arr = self.to_range("unit").data.astype(np.float32)
        return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]

    @classmethod
    def from_tensor(cls, t: torch.Tensor) -> "Image":
        """Inverse of :meth:`to_tensor` for a single unit-range image."""
        if t.dim() == 4:
            if t.shape[0] != 1:
                raise ValueError("from_tensor expects a batch of one")
            t = t[0]
        return cls(t.detach().cpu().double().numpy().transpose(1, 2, 0), "unit")


def load_image(path: str | Path, channels: int | None = None) -> Image:
    """Read an 8- or 16-bit image file into a unit-range :class:`Image`.

    Alpha channels are dropped. ``channels`` forces grayscale (1) or RGB (3).
    """
    with PILImage.open(path) as im:
        if channels == 1 and im.mode not in ("L", "I;16", "I"):
            im = im.convert("L")
        elif channels == 3 or im.mode in ("RGBA", "P", "LA", "CMYK", "YCbCr"):
            im = im.convert("RGB")
        arr = np.asarray(im)
    if arr.dtype == np.uint8:
        data = arr / 255.0
    elif arr.dtype in (np.uint16, np.int32):
        data = arr / 65535.0
    elif arr.dtype == bool:
        data = arr.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported pixel type {arr.dtype}")
    return Image(data, "unit")


def save_image(img: Image, path: str | Path) -> None:
    """Write ``img`` as 8-bit PNG (rounded, clipped)."""
    arr = np.clip(np.round(img.to_range("byte").data), 0, 255).astype(np.uint8)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    PILImage.fromarray(arr).save(path, format="PNG")
