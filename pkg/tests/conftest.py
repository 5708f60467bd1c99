import numpy as np
import pytest
import torch

from robustdenoise.backbone import load_encoder, random_encoder_weights
from robustdenoise.image import Image

TINY_LAYERS = (1, 1, 1, 1)
TINY_WIDTH = 16


def rgb_image(arr) -> Image:
    """uint8 (gray or RGB[A]) array as a unit-range 3-channel Image."""
    a = np.asarray(arr)
    if a.dtype == bool:
        a = a.astype(np.uint8) * 255
    if a.ndim == 2:
        a = np.repeat(a[:, :, None], 3, axis=2)
    return Image(a[:, :, :3] / 255.0)


def skimage_images(names):
    import skimage.data as sd
    return [rgb_image(getattr(sd, n)()) for n in names]


@pytest.fixture(scope="session")
def rn50_weights(tmp_path_factory):
    """Seeded random RN50 trunk (through stage 4) in the weight-file format."""
    path = tmp_path_factory.mktemp("weights") / "RN50.safetensors"
    random_encoder_weights(path, "RN50", seed=0, max_level=5)
    return path


@pytest.fixture(scope="session")
def rn50(rn50_weights):
    return load_encoder(rn50_weights, "RN50", max_level=5)


@pytest.fixture(scope="session")
def tiny_weights(tmp_path_factory):
    path = tmp_path_factory.mktemp("weights") / "tiny.safetensors"
    random_encoder_weights(path, "pluggable", seed=1, max_level=5, layers=TINY_LAYERS, width=TINY_WIDTH)
    return path


@pytest.fixture
def tiny_encoder(tiny_weights):
    return load_encoder(tiny_weights, "pluggable", 4, TINY_LAYERS, TINY_WIDTH)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


# -- acceptance reporting ---------------------------------------------------------

_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records and prints one PASS/FAIL line."""
    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}: {detail}"
        _CRITERIA[n] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
