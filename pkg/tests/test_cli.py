import csv
import hashlib
from pathlib import Path

import numpy as np
import pytest

from robustdenoise.cli import main
from robustdenoise.image import Image, load_image, save_image

from conftest import TINY_LAYERS, TINY_WIDTH


def sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_cfg(path: Path, text: str) -> Path:
    path.write_text(text)
    return path


def backbone_section(weights: Path) -> str:
    layers = ",".join(map(str, TINY_LAYERS))
    return f"[backbone]\nweight_path = {weights}\nvariant = pluggable\nlayers = {layers}\nwidth = {TINY_WIDTH}\n"


@pytest.fixture
def image_dir(tmp_path):
    d = tmp_path / "images"
    d.mkdir()
    g = np.random.default_rng(0)
    for k in range(3):
        save_image(Image(g.random((64, 80, 3))), d / f"im{k}.png")
    return d


def train_cfg(tmp_path, weights, image_dir, out="run", extra=""):
    return write_cfg(tmp_path / f"train_{out}.ini", f"""
[run]
seed = 7
out = {tmp_path / out}

{backbone_section(weights)}
[model]
decoder_widths = 8, 8, 8, 8
{extra}

[train]
dataset = {image_dir}
iterations = 4
batch_size = 2
patch_size = 32
checkpoint_every = 2
log_every = 2
""")


# -- train ---------------------------------------------------------------------

def test_train_minimal_config(tmp_path, tiny_weights, image_dir):
    assert main(["train", "--config", str(train_cfg(tmp_path, tiny_weights, image_dir))]) == 0
    run = tmp_path / "run"
    for name in ("final.safetensors", "loss_log.csv", "config.ini", "config.resolved.ini"):
        assert (run / name).is_file()


def test_train_missing_weight_path_names_field(tmp_path, image_dir, capsys):
    cfg = write_cfg(tmp_path / "bad.ini", f"[backbone]\nvariant = RN50\n[train]\ndataset = {image_dir}\n")
    assert main(["train", "--config", str(cfg)]) == 1
    assert "[backbone] weight_path: required field is missing" in capsys.readouterr().err


def test_train_unknown_key_rejected(tmp_path, tiny_weights, image_dir, capsys):
    cfg = train_cfg(tmp_path, tiny_weights, image_dir, extra="dropout = 0.1")
    assert main(["train", "--config", str(cfg)]) == 1
    assert "dropout" in capsys.readouterr().err


def test_train_invalid_value_is_validation_error(tmp_path, tiny_weights, image_dir, capsys):
    cfg = train_cfg(tmp_path, tiny_weights, image_dir, extra="pfa_gamma = lots")
    assert main(["train", "--config", str(cfg)]) == 1
    assert "[model] pfa_gamma" in capsys.readouterr().err


def test_train_weights_from_env_dir(tmp_path, tiny_weights, image_dir, monkeypatch):
    monkeypatch.setenv("ROBUSTDENOISE_WEIGHTS_DIR", str(tiny_weights.parent))
    monkeypatch.chdir(tmp_path)
    cfg = train_cfg(tmp_path, Path(tiny_weights.name), image_dir)
    assert main(["train", "--config", str(cfg)]) == 0


def test_train_deterministic_and_seed_override(tmp_path, tiny_weights, image_dir):
    digests = []
    for out in ("a", "b"):
        assert main(["train", "--config", str(train_cfg(tmp_path, tiny_weights, image_dir, out))]) == 0
        digests.append(sha(tmp_path / out / "final.safetensors"))
    assert digests[0] == digests[1]
    cfg = train_cfg(tmp_path, tiny_weights, image_dir, "c")
    assert main(["train", "--config", str(cfg), "--seed", "8", "--out", str(tmp_path / "c")]) == 0
    assert sha(tmp_path / "c" / "final.safetensors") != digests[0]


# -- denoise --------------------------------------------------------------------

@pytest.fixture
def checkpoint(tmp_path, tiny_weights, image_dir):
    assert main(["train", "--config", str(train_cfg(tmp_path, tiny_weights, image_dir, "ck"))]) == 0
    return tmp_path / "ck" / "final.safetensors"


def denoise_cfg(tmp_path, weights, ckpt, inputs, out):
    return write_cfg(tmp_path / f"denoise_{out}.ini", f"""
[run]
out = {tmp_path / out}
{backbone_section(weights)}
[denoise]
checkpoint = {ckpt}
inputs = {inputs}
""")


def test_denoise_png_round_trip_and_rerun(tmp_path, tiny_weights, checkpoint, image_dir):
    odd = tmp_path / "odd.png"
    save_image(Image(np.random.default_rng(1).random((45, 70, 3))), odd)
    for out in ("d1", "d2"):
        assert main(["denoise", "--config", str(denoise_cfg(tmp_path, tiny_weights, checkpoint, odd, out))]) == 0
    result = tmp_path / "d1" / "odd.png"
    assert load_image(result).shape == (45, 70, 3)
    assert result.read_bytes() == (tmp_path / "d2" / "odd.png").read_bytes()


def test_denoise_directory(tmp_path, tiny_weights, checkpoint, image_dir):
    assert main(["denoise", "--config", str(denoise_cfg(tmp_path, tiny_weights, checkpoint, image_dir, "dd"))]) == 0
    assert sorted(p.name for p in (tmp_path / "dd").glob("*.png")) == ["im0.png", "im1.png", "im2.png"]


def test_denoise_gray_input_with_rgb_checkpoint(tmp_path, tiny_weights, checkpoint, capsys):
    gray = tmp_path / "gray.png"
    save_image(Image(np.random.default_rng(2).random((32, 32, 1))), gray)
    assert main(["denoise", "--config", str(denoise_cfg(tmp_path, tiny_weights, checkpoint, gray, "g"))]) == 1
    err = capsys.readouterr().err
    assert "1 channel" in err and "channels_in = 1" in err


# -- analyze ---------------------------------------------------------------------

def analyze_cfg(tmp_path, weights, images, specs, out, extra=""):
    return write_cfg(tmp_path / f"analyze_{out}.ini", f"""
[run]
out = {tmp_path / out}
{backbone_section(weights)}
[analyze]
images = {", ".join(str(p) for p in images)}
specs = {specs}
{extra}
""")


def test_analyze_zero_noise_all_ones(tmp_path, tiny_weights, image_dir):
    cfg = analyze_cfg(tmp_path, tiny_weights, [image_dir / "im0.png"], "gaussian:sigma=0", "z")
    assert main(["analyze", "--config", str(cfg)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "z" / "similarity_pluggable_im0.csv")))
    assert len(rows) == 4
    assert all(float(r["cosine"]) == 1.0 and abs(float(r["cka"]) - 1) < 1e-9 for r in rows)


def test_analyze_two_backbones(tmp_path, tiny_weights, rn50_weights, image_dir):
    cfg = analyze_cfg(tmp_path, tiny_weights, [image_dir / "im0.png", image_dir / "im1.png"],
                      "gaussian:sigma=25; speckle:var=0.02", "two",
                      f"backbones = RN50={rn50_weights}, pluggable={tiny_weights}\nseparation_draws = 2")
    assert main(["analyze", "--config", str(cfg)]) == 0
    out = tmp_path / "two"
    for v in ("RN50", "pluggable"):
        for im in ("im0", "im1"):
            assert len(list(csv.DictReader(open(out / f"similarity_{v}_{im}.csv")))) == 8
        assert (out / f"separation_{v}.csv").is_file() and (out / f"embeddings_{v}.csv").is_file()


def test_analyze_invalid_kind(tmp_path, tiny_weights, image_dir, capsys):
    cfg = analyze_cfg(tmp_path, tiny_weights, [image_dir / "im0.png"], "pink:level=3", "bad")
    assert main(["analyze", "--config", str(cfg)]) == 1
    err = capsys.readouterr().err
    assert "[analyze] specs" in err and "gaussian" in err and "salt_pepper" in err


def test_analyze_rerun_identical(tmp_path, tiny_weights, image_dir):
    for out in ("r1", "r2"):
        cfg = analyze_cfg(tmp_path, tiny_weights, [image_dir / "im0.png", image_dir / "im2.png"],
                          "poisson:alpha=3", out, "separation_draws = 2")
        assert main(["analyze", "--config", str(cfg)]) == 0
    for f in (tmp_path / "r1").glob("*.csv"):
        assert f.read_bytes() == (tmp_path / "r2" / f.name).read_bytes()


# -- benchmark -------------------------------------------------------------------

def bench_cfg(tmp_path, weights, ckpt, manifests, out):
    return write_cfg(tmp_path / f"bench_{out}.ini", f"""
[run]
seed = 3
out = {tmp_path / out}
{backbone_section(weights)}
[benchmark]
checkpoint = {ckpt}
manifests = {", ".join(str(m) for m in manifests)}
specs = gaussian:sigma=25; salt_pepper:d=0.016
""")


def test_benchmark_passthrough_repeatable(tmp_path, tiny_weights, image_dir, capsys):
    for out in ("b1", "b2"):
        assert main(["benchmark", "--config", str(bench_cfg(tmp_path, tiny_weights, "passthrough",
                                                                [image_dir], out))]) == 0
    csv1 = (tmp_path / "b1" / "benchmark.csv").read_bytes()
    assert csv1 == (tmp_path / "b2" / "benchmark.csv").read_bytes()
    rows = list(csv.DictReader(open(tmp_path / "b1" / "benchmark.csv")))
    assert len(rows) == 2 and all(r["checkpoint"] == "passthrough" for r in rows)
    assert "images" in capsys.readouterr().out


def test_benchmark_with_checkpoint(tmp_path, tiny_weights, checkpoint, image_dir):
    assert main(["benchmark", "--config", str(bench_cfg(tmp_path, tiny_weights, checkpoint, [image_dir], "bc"))]) == 0
    rows = list(csv.DictReader(open(tmp_path / "bc" / "benchmark.csv")))
    assert rows[0]["checkpoint"] == sha(checkpoint)[:16]


def test_benchmark_empty_manifest(tmp_path, tiny_weights, capsys):
    manifest = tmp_path / "empty.txt"
    manifest.write_text("dataset = nothing\n# no images\n")
    assert main(["benchmark", "--config", str(bench_cfg(tmp_path, tiny_weights, "passthrough",
                                                            [manifest], "e"))]) == 1
    assert "empty" in capsys.readouterr().err


def test_unknown_variant_is_validation_error(tmp_path, tiny_weights, image_dir, capsys):
    cfg = analyze_cfg(tmp_path, tiny_weights, [image_dir / "im0.png"], "gaussian:sigma=5", "v",
                      f"backbones = RN18={tiny_weights}")
    assert main(["analyze", "--config", str(cfg)]) == 1
    assert "unknown backbone variant 'RN18'" in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "none.ini")]) == 1
    assert "not found" in capsys.readouterr().err


def test_runtime_failure_exit_code(tmp_path, tiny_weights, capsys):
    # a readable config whose dataset images are all smaller than the patch
    d = tmp_path / "small"
    d.mkdir()
    save_image(Image(np.zeros((16, 16, 3))), d / "s.png")
    cfg = train_cfg(tmp_path, tiny_weights, d, "small_run")
    assert main(["train", "--config", str(cfg)]) == 2
    assert "runtime error" in capsys.readouterr().err
