"""Image denoising from the multi-scale features of a frozen contrastive-pretrained ResNet."""

from .backbone import (ChannelAdapter, FeaturePyramid, FrozenEncoder, adapt_channels, extract_features,
                       import_clip_checkpoint, load_encoder)
from .image import Image, load_image, save_image
from .model import Denoiser, DenoiserConfig, apply_pfa, count_parameters, denoise_image
from .noise import NoiseSpec

__all__ = [
    "ChannelAdapter", "Denoiser", "DenoiserConfig", "FeaturePyramid", "FrozenEncoder", "Image", "NoiseSpec",
    "adapt_channels", "apply_pfa", "count_parameters", "denoise_image", "extract_features",
    "import_clip_checkpoint", "load_encoder", "load_image", "save_image",
]
