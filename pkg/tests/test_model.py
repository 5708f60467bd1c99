import numpy as np
import pytest
import torch

from robustdenoise.backbone import FeaturePyramid, load_encoder
from robustdenoise.image import Image
from robustdenoise.model import (
    Denoiser, DenoiserConfig, apply_pfa, count_parameters, denoise_image, load_checkpoint, read_checkpoint,
    save_checkpoint,
)

from conftest import TINY_LAYERS, TINY_WIDTH

TINY = dict(backbone_variant="pluggable", decoder_widths=(16, 16, 8, 8))


def ones_pyramid(n=100_000, levels=(1, 2, 3, 4, 5)):
    return FeaturePyramid({i: torch.ones(1, 1, n, 1, dtype=torch.float64) for i in levels}, 64)


# -- progressive feature augmentation -----------------------------------------

def test_pfa_gamma_zero_is_identity():
    pyr = FeaturePyramid({i: torch.randn(1, 4, 8, 8) for i in range(1, 6)}, 4)
    out = apply_pfa(pyr, 0.0, seed=1)
    for i in pyr.levels:
        assert torch.equal(out.levels[i], pyr.levels[i])


def test_pfa_level_std_grows_linearly():
    out = apply_pfa(ones_pyramid(), 0.025, seed=2)
    for i, expected in [(1, 0.025), (2, 0.05), (3, 0.075), (4, 0.1)]:
        assert out.levels[i].std().item() == pytest.approx(expected, rel=0.01)
    assert torch.equal(out.levels[5], torch.ones_like(out.levels[5]))


def test_pfa_million_samples_level3():
    out = apply_pfa(ones_pyramid(10 ** 6, levels=(1, 2, 3, 4)), 0.025, seed=3).levels[3]
    assert abs(out.mean().item() - 1) < 3 * 0.075 / 1e3
    assert out.std().item() == pytest.approx(0.075, rel=0.01)


def test_pfa_preserves_shapes_and_rejects_negative():
    pyr = FeaturePyramid({i: torch.randn(2, 3 * i, 16 // i, 8) for i in range(1, 5)}, 3)
    out = apply_pfa(pyr, 0.025, seed=0)
    assert all(out.levels[i].shape == pyr.levels[i].shape for i in pyr.levels)
    with pytest.raises(ValueError):
        apply_pfa(pyr, -0.1, seed=0)


def test_pfa_multiplicative():
    base = torch.full((1, 2, 50, 50), 3.0)
    pyr = FeaturePyramid({i: base.clone() for i in range(1, 5)}, 2)
    unit = FeaturePyramid({i: torch.ones_like(base) for i in range(1, 5)}, 2)
    a, b = apply_pfa(pyr, 0.05, seed=9), apply_pfa(unit, 0.05, seed=9)
    for i in range(1, 5):
        torch.testing.assert_close(a.levels[i], 3.0 * b.levels[i])


# -- forward ------------------------------------------------------------------

@pytest.fixture
def tiny_model(tiny_encoder):
    return Denoiser(tiny_encoder, DenoiserConfig(**TINY))


def test_forward_shape_rn50(rn50):
    model = Denoiser(rn50, DenoiserConfig()).eval()
    out = denoise_image(model, Image(np.random.default_rng(0).random((128, 128, 3))))
    assert out.shape == (128, 128, 3)


@pytest.mark.parametrize("h,w", [(64, 64), (100, 70), (32, 160)])
def test_forward_preserves_shape(tiny_model, h, w):
    out = tiny_model.eval()(torch.rand(2, 3, h, w))
    assert out.shape == (2, 3, h, w)


def test_eval_forward_deterministic(tiny_model):
    tiny_model.eval()
    x = torch.rand(1, 3, 64, 64)
    a = tiny_model(x, torch.Generator().manual_seed(1))
    b = tiny_model(x, torch.Generator().manual_seed(2))
    assert torch.equal(a, b)


def test_train_forward_depends_on_seed(tiny_model):
    tiny_model.train()
    x = torch.rand(1, 3, 64, 64)
    a = tiny_model(x, torch.Generator().manual_seed(1))
    b = tiny_model(x, torch.Generator().manual_seed(2))
    c = tiny_model(x, torch.Generator().manual_seed(1))
    assert not torch.equal(a, b)
    assert torch.equal(a, c)


def test_no_global_residual(tiny_encoder):
    # zeroing the head gives a zero image, not the input
    model = Denoiser(tiny_encoder, DenoiserConfig(**TINY)).eval()
    with torch.no_grad():
        model.decoder.head.weight.zero_()
        model.decoder.head.bias.zero_()
    assert torch.equal(model(torch.rand(1, 3, 32, 32)), torch.zeros(1, 3, 32, 32))


@pytest.mark.parametrize("inject", [True, False])
def test_noisy_input_path_structure(tiny_encoder, inject):
    model = Denoiser(tiny_encoder, DenoiserConfig(inject_noisy_input=inject, **TINY)).eval()
    x = torch.rand(1, 3, 32, 32, requires_grad=True)
    model(x).sum().backward()
    # the encoder runs without autograd, so only the injection path can reach the pixels
    if inject:
        assert x.grad is not None and x.grad.abs().sum() > 0
    else:
        assert x.grad is None
    assert model.decoder.block0[0].in_channels == 8 + (3 if inject else 0)


def test_encoder_gets_no_gradients(tiny_model):
    tiny_model.train()
    out = tiny_model(torch.rand(2, 3, 32, 32), torch.Generator().manual_seed(0))
    out.abs().mean().backward()
    assert all(p.grad is None for p in tiny_model.encoder.parameters())
    assert all(p.grad is not None for p in tiny_model.learnable_parameters())


def test_use_f5_requires_level5_encoder(tiny_encoder, tiny_weights):
    with pytest.raises(ValueError, match="max_level=5"):
        Denoiser(tiny_encoder, DenoiserConfig(use_f5=True, **TINY))
    enc5 = load_encoder(tiny_weights, "pluggable", 5, TINY_LAYERS, TINY_WIDTH)
    model = Denoiser(enc5, DenoiserConfig(use_f5=True, **TINY)).eval()
    assert model(torch.rand(1, 3, 64, 64)).shape == (1, 3, 64, 64)


def test_single_channel_adapter_path(tiny_encoder):
    model = Denoiser(tiny_encoder, DenoiserConfig(channels_in=1, **TINY))
    model.train()
    out = model(torch.rand(2, 1, 64, 64), torch.Generator().manual_seed(0))
    assert out.shape == (2, 1, 64, 64)
    out.mean().backward()
    assert model.adapter.conv.weight.grad is not None
    assert all(p.grad is None for p in model.encoder.parameters())


def test_channel_mismatch_error(tiny_model):
    with pytest.raises(ValueError, match="channel adapter"):
        denoise_image(tiny_model, Image(np.zeros((32, 32, 1))))


def test_config_validation():
    with pytest.raises(ValueError):
        DenoiserConfig(pfa_gamma=-1)
    with pytest.raises(ValueError):
        DenoiserConfig(decoder_widths=(8, 8, 8))
    with pytest.raises(ValueError):
        DenoiserConfig(channels_in=2)
    with pytest.raises(ValueError):
        DenoiserConfig(upsample_mode="bicubic")


def test_variant_mismatch(tiny_encoder):
    with pytest.raises(ValueError, match="backbone"):
        Denoiser(tiny_encoder, DenoiserConfig(backbone_variant="RN50"))


# -- parameter accounting --------------------------------------------------------

def _block(cin, cout):
    return cin * cout * 9 + cout + cout * cout * 9 + cout


def test_learnable_count_matches_analytic_layout(rn50):
    model = Denoiser(rn50, DenoiserConfig())
    _, learnable = count_parameters(model)
    expected = (_block(1024, 512) + _block(512 + 512, 256) + _block(256 + 256, 128)
                + _block(128 + 64, 64) + _block(64 + 3, 64) + 64 * 3 * 9 + 3)
    assert learnable == expected


def test_frozen_count_excludes_stage4(rn50_weights):
    enc4 = load_encoder(rn50_weights, "RN50", 4)
    frozen4, _ = count_parameters(Denoiser(enc4, DenoiserConfig()))
    enc5 = load_encoder(rn50_weights, "RN50", 5)
    frozen5, _ = count_parameters(Denoiser(enc5, DenoiserConfig(use_f5=True)))
    assert frozen4 == pytest.approx(8.5e6, rel=0.05)
    assert frozen5 > frozen4 + 14e6


def test_budget(rn50_weights):
    enc = load_encoder(rn50_weights, "RN50", 4)
    frozen, learnable = count_parameters(Denoiser(enc, DenoiserConfig()))
    assert learnable == pytest.approx(11e6, rel=0.2)
    assert frozen + learnable == pytest.approx(19.5e6, rel=0.1)


# -- checkpoints ------------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tiny_encoder, tmp_path):
    cfg = DenoiserConfig(channels_in=1, pfa_gamma=0.03, **TINY)
    model = Denoiser(tiny_encoder, cfg)
    path = tmp_path / "ck.safetensors"
    digest = save_checkpoint(path, model, iteration=17, seed=5)
    restored, info = load_checkpoint(path, tiny_encoder)
    assert info.config == cfg and info.iteration == 17 and info.seed == 5
    assert info.encoder_digest == tiny_encoder.digest
    for k, v in model.learnable_state().items():
        assert torch.equal(v, restored.learnable_state()[k])
    assert save_checkpoint(tmp_path / "again.safetensors", restored, 17, 5) == digest


def test_checkpoint_rejects_other_encoder(tiny_encoder, tiny_weights, tmp_path, rn50_weights):
    path = tmp_path / "ck.safetensors"
    save_checkpoint(path, Denoiser(tiny_encoder, DenoiserConfig(**TINY)))
    other = load_encoder(rn50_weights, "RN50", 4)
    with pytest.raises(ValueError):
        load_checkpoint(path, other)


def test_read_checkpoint_requires_config(tmp_path):
    from safetensors.torch import save_file
    path = tmp_path / "plain.safetensors"
    save_file({"x": torch.zeros(2)}, str(path))
    with pytest.raises(ValueError, match="not a denoiser checkpoint"):
        read_checkpoint(path)
