"""Command-line entry point: ``robustdenoise train|denoise|analyze|benchmark``.

Exit codes: 0 success, 1 validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from .backbone import WeightFileError, load_encoder
from .config import ConfigError, load_config, resolve_weight_path, snapshot
from .data import ImageDataset, Manifest
from .evaluate import format_table, passthrough, run_benchmark, write_records_csv
from .image import load_image, save_image
from .model import Denoiser, DenoiserConfig, denoise_image, file_digest, load_checkpoint, read_checkpoint
from .noise import derive_seed
from .train import TrainConfig, train

log = logging.getLogger("robustdenoise")

_INIT_STREAM = 3


def _encoder(cfg: dict, max_level: int):
    bb = cfg["backbone"]
    path = resolve_weight_path(bb["weight_path"])
    if not path.is_file():
        raise ConfigError(f"[backbone] weight_path: file not found: {path}")
    return load_encoder(path, bb["variant"], max_level, bb["layers"], bb["width"])


def _prepare_out(cfg: dict, config_path: Path) -> Path:
    out = cfg["run"]["out"]
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_bytes(config_path.read_bytes())
    snapshot(cfg, out / "config.resolved.ini")
    return out


def cmd_train(cfg: dict, config_path: Path) -> int:
    m, t, seed = cfg["model"], cfg["train"], cfg["run"]["seed"]
    try:
        dcfg = DenoiserConfig(backbone_variant=cfg["backbone"]["variant"], use_f5=m["use_f5"],
                              inject_noisy_input=m["inject_noisy_input"], pfa_gamma=m["pfa_gamma"],
                              decoder_widths=m["decoder_widths"], upsample_mode=m["upsample_mode"],
                              channels_in=m["channels_in"], backbone_layers=cfg["backbone"]["layers"],
                              backbone_width=cfg["backbone"]["width"])
        tcfg = TrainConfig(iterations=t["iterations"], batch_size=t["batch_size"], patch_size=t["patch_size"],
                           lr_init=t["lr_init"], lr_final=t["lr_final"], weight_decay=t["weight_decay"],
                           train_noise=t["noise"], seed=seed, augment=t["augment"],
                           checkpoint_every=t["checkpoint_every"], log_every=t["log_every"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not t["dataset"].exists():
        raise ConfigError(f"[train] dataset: not found: {t['dataset']}")
    encoder = _encoder(cfg, dcfg.max_level)
    out = _prepare_out(cfg, config_path)
    dataset = ImageDataset.from_path(t["dataset"], dcfg.channels_in)
    torch.manual_seed(derive_seed(seed, _INIT_STREAM) & (2 ** 63 - 1))
    model = Denoiser(encoder, dcfg)
    result = train(model, dataset, tcfg, out_dir=out)
    print(f"checkpoint {result.checkpoint} sha256 {result.digest}")
    return 0


def _collect_inputs(paths: list[Path]) -> list[Path]:
    files = []
    for p in paths:
        if p.is_dir():
            files += Manifest.from_directory(p).paths
        elif p.is_file():
            files.append(p)
        else:
            raise ConfigError(f"[denoise] inputs: not found: {p}")
    if not files:
        raise ConfigError("[denoise] inputs: no images found")
    return files


def cmd_denoise(cfg: dict, config_path: Path) -> int:
    d = cfg["denoise"]
    if not d["checkpoint"].is_file():
        raise ConfigError(f"[denoise] checkpoint: file not found: {d['checkpoint']}")
    files = _collect_inputs(d["inputs"])
    info, _ = read_checkpoint(d["checkpoint"])
    images = []
    for f in files:
        img = load_image(f)
        if img.channels != info.config.channels_in:
            hint = " (train with [model] channels_in = 1 to enable the 1x1 channel adapter)" if img.channels == 1 else ""
            raise ConfigError(f"{f}: image has {img.channels} channel(s), checkpoint expects "
                              f"{info.config.channels_in}{hint}")
        images.append((f, img))
    model, _ = load_checkpoint(d["checkpoint"], _encoder(cfg, info.config.max_level))
    out = _prepare_out(cfg, config_path)
    for f, img in images:
        save_image(denoise_image(model, img).clipped(), out / (f.stem + ".png"))
        log.info("denoised %s", f)
    return 0


def cmd_analyze(cfg: dict, config_path: Path) -> int:
    from .analyze import content_separation, similarity_sweep

    a = cfg["analyze"]
    if a["max_level"] not in (4, 5):
        raise ConfigError(f"[analyze] max_level: must be 4 or 5, got {a['max_level']}")
    for p in a["images"]:
        if not p.is_file():
            raise ConfigError(f"[analyze] images: not found: {p}")
    backbones = a["backbones"] or {cfg["backbone"]["variant"]: cfg["backbone"]["weight_path"]}
    out = _prepare_out(cfg, config_path)
    images = [(p.stem, load_image(p, 3)) for p in a["images"]]
    for variant, wpath in backbones.items():
        sub = {"backbone": {**cfg["backbone"], "variant": variant, "weight_path": wpath}}
        enc = _encoder(sub, a["max_level"])
        for image_id, img in images:
            rep = similarity_sweep(enc, img, a["specs"], a["seeds"], image_id, a["max_level"])
            rep.to_csv(out / f"similarity_{variant}_{image_id}.csv")
        if a["separation_draws"]:
            embed = out / f"embeddings_{variant}.csv" if a["embeddings"] else None
            res = content_separation(enc, [im for _, im in images], a["separation_spec"], a["separation_draws"],
                                     seed=cfg["run"]["seed"], max_level=a["max_level"], embed_csv=embed,
                                     image_ids=[i for i, _ in images])
            lines = ["scale,inter,intra,ratio"] + [f"{i},{res.inter[i]:.8f},{res.intra[i]:.8f},{res.ratios[i]:.8f}"
                                                    for i in sorted(res.ratios)]
            (out / f"separation_{variant}.csv").write_text("\n".join(lines) + "\n")
    return 0


def cmd_benchmark(cfg: dict, config_path: Path) -> int:
    b = cfg["benchmark"]
    manifests = []
    for p in b["manifests"]:
        if not p.exists():
            raise ConfigError(f"[benchmark] manifests: not found: {p}")
        m = Manifest.resolve(p)
        if not m.paths:
            raise ConfigError(f"[benchmark] manifests: dataset {m.dataset_id!r} ({p}) is empty")
        manifests.append(m)
    if b["checkpoint"] == "passthrough":
        fn, ckpt_id, channels = passthrough, "passthrough", 3
    else:
        path = Path(b["checkpoint"])
        if not path.is_file():
            raise ConfigError(f"[benchmark] checkpoint: file not found: {path}")
        info, _ = read_checkpoint(path)
        model, _ = load_checkpoint(path, _encoder(cfg, info.config.max_level))
        fn = lambda img: denoise_image(model, img)  # noqa: E731
        ckpt_id, channels = file_digest(path)[:16], info.config.channels_in
    out = _prepare_out(cfg, config_path)
    records = run_benchmark(fn, manifests, b["specs"], cfg["run"]["seed"], ckpt_id, channels)
    write_records_csv(records, out / "benchmark.csv")
    table = format_table(records)
    (out / "benchmark.txt").write_text(table)
    print(table, end="")
    return 0


COMMANDS = {"train": cmd_train, "denoise": cmd_denoise, "analyze": cmd_analyze, "benchmark": cmd_benchmark}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="robustdenoise", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, type=Path)
    parser.add_argument("--seed", type=int, default=None, help="override [run] seed")
    parser.add_argument("--out", type=Path, default=None, help="override [run] out")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.command)
        if args.seed is not None:
            cfg["run"]["seed"] = args.seed
        if args.out is not None:
            cfg["run"]["out"] = args.out
        return COMMANDS[args.command](cfg, args.config)
    except (ConfigError, WeightFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - surfaced as runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
