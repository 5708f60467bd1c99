"""INI run configuration with strict, field-level validation.

Each command reads the sections it needs; unknown sections or keys are
rejected before any computation starts.
"""

from __future__ import annotations

import configparser
import os
from pathlib import Path

from .backbone import VARIANTS
from .noise import NoiseSpec

WEIGHTS_ENV = "ROBUSTDENOISE_WEIGHTS_DIR"
REQUIRED = object()


class ConfigError(ValueError):
    """Validation failure; the message names the offending section and key."""


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _list(text: str, sep: str = ",") -> list[str]:
    return [s.strip() for s in text.replace("\n", sep).split(sep) if s.strip()]


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(s) for s in _list(text))


def _specs(text: str) -> list[NoiseSpec]:
    return [NoiseSpec.parse(s) for s in _list(text, ";")]


def _paths(text: str) -> list[Path]:
    return [Path(s) for s in _list(text)]


def _named_paths(text: str) -> dict[str, Path]:
    out = {}
    for item in _list(text):
        name, eq, p = item.partition("=")
        if not eq:
            raise ValueError(f"expected NAME=PATH, got {item!r}")
        out[name.strip()] = Path(p.strip())
    return out


def _variant(text: str) -> str:
    v = text.strip()
    if v not in VARIANTS and v != "pluggable":
        raise ValueError(f"unknown backbone variant {v!r}; choose from {sorted(VARIANTS) + ['pluggable']}")
    return v


def _backbones(text: str) -> dict[str, Path]:
    out = _named_paths(text)
    for name in out:
        _variant(name)
    return out


def _opt(parse):
    return lambda text: None if text.strip().lower() in ("", "none") else parse(text)


SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {
        "seed": (int, 0),
        "out": (Path, Path("runs")),
    },
    "backbone": {
        "weight_path": (Path, REQUIRED),
        "variant": (_variant, "RN50"),
        "layers": (_opt(_ints), None),
        "width": (_opt(int), None),
    },
    "model": {
        "use_f5": (_bool, False),
        "inject_noisy_input": (_bool, True),
        "pfa_gamma": (float, 0.025),
        "decoder_widths": (_ints, (512, 256, 128, 64)),
        "upsample_mode": (str, "bilinear"),
        "channels_in": (int, 3),
    },
    "train": {
        "dataset": (Path, REQUIRED),
        "iterations": (int, 300_000),
        "batch_size": (int, 16),
        "patch_size": (int, 128),
        "lr_init": (float, 3e-4),
        "lr_final": (float, 1e-6),
        "weight_decay": (float, 0.0),
        "noise": (NoiseSpec.parse, NoiseSpec("gaussian", {"sigma": 15})),
        "augment": (_bool, True),
        "checkpoint_every": (int, 10_000),
        "log_every": (int, 100),
    },
    "denoise": {
        "checkpoint": (Path, REQUIRED),
        "inputs": (_paths, REQUIRED),
    },
    "analyze": {
        "images": (_paths, REQUIRED),
        "specs": (_specs, REQUIRED),
        "seeds": (_ints, (0, 1, 2)),
        "max_level": (int, 4),
        "backbones": (_opt(_backbones), None),
        "separation_draws": (int, 0),
        "separation_spec": (NoiseSpec.parse, NoiseSpec("gaussian", {"sigma": 25.5})),
        "embeddings": (_bool, True),
    },
    "benchmark": {
        "checkpoint": (str, REQUIRED),
        "manifests": (_paths, REQUIRED),
        "specs": (_specs, REQUIRED),
    },
}

COMMAND_SECTIONS = {
    "train": ("run", "backbone", "model", "train"),
    "denoise": ("run", "backbone", "denoise"),
    "analyze": ("run", "backbone", "analyze"),
    "benchmark": ("run", "backbone", "benchmark"),
}
# sections that may be omitted entirely when all their keys have defaults
_OPTIONAL = {"run", "model"}


def resolve_weight_path(path: Path) -> Path:
    """Relative weight paths that do not exist fall back to ``$ROBUSTDENOISE_WEIGHTS_DIR``."""
    if path.is_absolute() or path.exists():
        return path
    root = os.environ.get(WEIGHTS_ENV)
    if root and (Path(root) / path).exists():
        return Path(root) / path
    return path


def load_config(path: str | Path, command: str) -> dict[str, dict]:
    """Parse and validate the sections ``command`` needs."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if command not in COMMAND_SECTIONS:
        raise ConfigError(f"unknown command {command!r}")
    wanted = COMMAND_SECTIONS[command]
    extra = [s for s in parser.sections() if s not in SCHEMA]
    if extra:
        raise ConfigError(f"unknown section(s) {extra}; known: {sorted(SCHEMA)}")
    out = {}
    for section in wanted:
        if not parser.has_section(section) and section not in _OPTIONAL:
            raise ConfigError(f"missing section [{section}]")
        raw = dict(parser.items(section)) if parser.has_section(section) else {}
        unknown = sorted(set(raw) - set(SCHEMA[section]))
        if unknown:
            raise ConfigError(f"[{section}] unknown key(s) {unknown}; known: {sorted(SCHEMA[section])}")
        values = {}
        for key, (parse, default) in SCHEMA[section].items():
            if key not in raw:
                if default is REQUIRED:
                    raise ConfigError(f"[{section}] {key}: required field is missing")
                values[key] = default
                continue
            try:
                values[key] = parse(raw[key])
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from exc
        out[section] = values
    return out


def snapshot(cfg: dict[str, dict], path: str | Path) -> None:
    """Write the resolved configuration back out as INI."""
    parser = configparser.ConfigParser(interpolation=None)
    for section, values in cfg.items():
        parser.add_section(section)
        for key, value in values.items():
            parser.set(section, key, _render(value))
    with open(path, "w") as fh:
        parser.write(fh)


def _render(value) -> str:
    if isinstance(value, NoiseSpec):
        return value.kind + ":" + ",".join(f"{k}={v:g}" for k, v in value.params.items())
    if isinstance(value, dict):
        return ", ".join(f"{k}={v}" for k, v in value.items())
    if isinstance(value, (list, tuple)):
        sep = "; " if value and isinstance(value[0], NoiseSpec) else ", "
        return sep.join(_render(v) for v in value)
    if value is None:
        return "none"
    return str(value)
