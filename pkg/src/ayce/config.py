"""Config file handling and named presets for the training stack.

Config files are TOML with [model], [loss], and [train] sections. Values
merge in increasing precedence: preset defaults, then the file, then CLI
flag overrides. The fully merged mapping is what gets embedded in
checkpoints and printed at the start of every run.
"""

from __future__ import annotations

import copy

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from .errors import ConfigError
from .training import LossConfig, TrainConfig
from .visual import EncoderConfig

# full-scale recipe: the sizes and schedule of the original training runs
PRESET_FULL = {
    "model": {
        "n_blocks": 6,
        "n_heads": 8,
        "d_model": 256,
        "d_ff": 2048,
        "dropout_p": 0.1,
        "crop_size": [110, 90],
    },
    "loss": {
        "margin": 1.0,
        "beta": 0.1,
        "metric": "euclidean",
    },
    "train": {
        "epochs": 680,
        "batch_size": 96,
        "lr": 3.5e-5,
        "milestones": [[450, 2.5e-5], [650, 1.5e-5]],
        "optimizer": "adam",
        "checkpoint_every": 0,
    },
}

# shrunk to run on one CPU in minutes; schedule scaled by the same ratios
_DESK_LR = 1e-3
PRESET_DESK = {
    "model": {
        "n_blocks": 2,
        "n_heads": 4,
        "d_model": 64,
        "d_ff": 256,
        "dropout_p": 0.1,
        "crop_size": [48, 40],
    },
    "loss": {
        "margin": 1.0,
        "beta": 0.1,
        "metric": "euclidean",
    },
    "train": {
        "epochs": 200,
        "batch_size": 8,
        "lr": _DESK_LR,
        "milestones": [[132, _DESK_LR * 5 / 7], [191, _DESK_LR * 3 / 7]],
        "optimizer": "adam",
        "checkpoint_every": 0,
    },
}

PRESETS = {
    "desk": PRESET_DESK,
    "paper-2021": PRESET_FULL,
}

_SECTION_KEYS = {
    "model": set(PRESET_FULL["model"]),
    "loss": set(PRESET_FULL["loss"]) | {"positive_aggregate", "negative_aggregate"},
    "train": set(PRESET_FULL["train"]) | {"seed", "momentum"},
}


def get_preset(name):
    try:
        return copy.deepcopy(PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")


def load_config_file(path):
    """Parse a TOML config file and reject unknown sections or keys."""
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}")
    for section, values in raw.items():
        if section not in _SECTION_KEYS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: [{section}] must be a table")
        unknown = set(values) - _SECTION_KEYS[section]
        if unknown:
            raise ConfigError(f"{path}: unknown key(s) in [{section}]: {sorted(unknown)}")
    return raw


def merge_config(base, *layers):
    """Overlay section dicts left to right; later layers win per key."""
    merged = copy.deepcopy(base)
    for layer in layers:
        if not layer:
            continue
        for section, values in layer.items():
            target = merged.setdefault(section, {})
            for key, value in values.items():
                if value is not None:
                    target[key] = value
    return merged


def effective_config(preset="desk", config_path=None, overrides=None):
    """Resolve the final config mapping: preset <- file <- CLI overrides."""
    merged = get_preset(preset)
    if config_path is not None:
        merged = merge_config(merged, load_config_file(config_path))
    if overrides:
        merged = merge_config(merged, overrides)
    return merged


def make_encoder_config(cfg):
    model = cfg.get("model", {})
    keys = ("n_blocks", "n_heads", "d_model", "d_ff", "dropout_p")
    return EncoderConfig(**{k: model[k] for k in keys if k in model})


def make_loss_config(cfg):
    return LossConfig(**cfg.get("loss", {}))


def make_train_config(cfg, seed=None):
    train = dict(cfg.get("train", {}))
    if "milestones" in train:
        train["milestones"] = tuple(tuple(m) for m in train["milestones"])
    if seed is not None:
        train["seed"] = seed
    return TrainConfig(**train)


def crop_size_of(cfg):
    return tuple(cfg.get("model", {}).get("crop_size", (110, 90)))
