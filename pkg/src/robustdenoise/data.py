"""Image folders and dataset manifests."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

from .image import Image, load_image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg", ".ppm", ".pgm"}


@dataclass
class Manifest:
    """A dataset id plus an ordered list of image paths.

    File format: one path per line (relative paths resolve against the
    manifest's directory), ``#`` comments, and an optional
    ``dataset = NAME`` line. Without it the id is the file stem.
    """

    dataset_id: str
    paths: list[Path] = field(default_factory=list)

    @classmethod
    def read(cls, path: str | Path) -> "Manifest":
        path = Path(path)
        dataset_id = path.stem
        paths = []
        for line in path.read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, eq, value = line.partition("=")
            if eq and key.strip() == "dataset":
                dataset_id = value.strip()
                continue
            p = Path(line)
            paths.append(p if p.is_absolute() else path.parent / p)
        return cls(dataset_id, paths)

    @classmethod
    def from_directory(cls, path: str | Path) -> "Manifest":
        path = Path(path)
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        return cls(path.name, files)

    @classmethod
    def resolve(cls, path: str | Path) -> "Manifest":
        """Directory of images or manifest file."""
        path = Path(path)
        if path.is_dir():
            return cls.from_directory(path)
        if path.is_file():
            return cls.read(path)
        raise FileNotFoundError(f"dataset not found: {path}")

    def write(self, path: str | Path) -> None:
        lines = [f"dataset = {self.dataset_id}"] + [str(p) for p in self.paths]
        Path(path).write_text("\n".join(lines) + "\n")


def load_images(manifest: Manifest, channels: int | None = None, skip_unreadable: bool = False
                ) -> tuple[list[tuple[int, Image]], int]:
    """Load every image; returns ``([(index, image), ...], skipped_count)``."""
    out, skipped = [], 0
    for i, p in enumerate(manifest.paths):
        try:
            out.append((i, load_image(p, channels)))
        except (OSError, ValueError) as exc:
            if not skip_unreadable:
                raise
            log.warning("skipping unreadable image %s: %s", p, exc)
            skipped += 1
    return out, skipped


class ImageDataset:
    """In-memory training images (unit range)."""

    def __init__(self, images: list[Image]):
        if not images:
            raise ValueError("dataset is empty")
        self.images = images

    @classmethod
    def from_path(cls, path: str | Path, channels: int | None = None) -> "ImageDataset":
        manifest = Manifest.resolve(path)
        loaded, _ = load_images(manifest, channels)
        return cls([img for _, img in loaded])

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i) -> Image:
        return self.images[i]
