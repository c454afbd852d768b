"""Layered run configuration: defaults < YAML file < environment < CLI flags.

Every key lives under a section; unknown sections or keys are rejected so
typos fail loudly. Environment variables use the PATCHADV_ prefix
(PATCHADV_TRAIN_EPOCHS=5 sets train.epochs); CLI flags use dotted paths
(--train.epochs=5). A resolved snapshot is written next to every output so
any run is reproducible from its artifacts.
"""

import copy
import os
from pathlib import Path

import yaml

from .losses import LossConfig
from .training import TrainConfig

ENV_PREFIX = "PATCHADV_"

_MODEL_SPEC_KEYS = {
    "id", "weights", "arch", "taps", "task", "dataset", "input_size",
    "mean", "std", "classes", "num_classes", "options", "cam_layer",
}

DEFAULTS = {
    "data": {
        "train_manifest": "",
        "test_manifest": "",
        "classes": "",
    },
    "surrogate": {key: None for key in _MODEL_SPEC_KEYS},
    "generator": {
        "width": 64,
        "residual_blocks": 6,
    },
    "loss": {
        "tau": 0.07,
        "R": 128,
        "queries_per_layer": 1,
        "use_global": True,
        "use_lpcl": True,
    },
    "train": {
        "learning_rate": 1e-4,
        "beta1": 0.5,
        "beta2": 0.999,
        "batch_size": 32,
        "epochs": 20,
        "mode": "untargeted",
        "target": [],
        "seed": 0,
        "checkpoint_dir": "checkpoints",
        "grad_clip": None,
        "deterministic": True,
        "resume": "",
    },
    "attack": {
        "epsilon": 10.0,
        "checkpoint": "",
    },
    "eval": {
        "victims": [],
        "manifests": {},
        "batch_size": 16,
        "report_dir": "reports",
    },
    "visualize": {
        "output": "cam_grid.png",
        "cam_class": None,
    },
}


class ConfigError(ValueError):
    pass


def _check_model_spec(spec, where):
    if not isinstance(spec, dict):
        raise ConfigError(f"{where} must be a mapping, got {type(spec).__name__}")
    unknown = set(spec) - _MODEL_SPEC_KEYS
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where}")


def _merge_section(cfg, section, values, source):
    if section not in cfg:
        raise ConfigError(f"unknown config section {section!r} (from {source})")
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be a mapping (from {source})")
    for key, value in values.items():
        _set_key(cfg, section, key, value, source)


def _set_key(cfg, section, key, value, source):
    if section not in cfg:
        raise ConfigError(f"unknown config section {section!r} (from {source})")
    if section == "surrogate":
        if key not in _MODEL_SPEC_KEYS:
            raise ConfigError(f"unknown config key surrogate.{key} (from {source})")
    elif key not in cfg[section]:
        raise ConfigError(f"unknown config key {section}.{key} (from {source})")
    if section == "eval" and key == "victims":
        for i, spec in enumerate(value or []):
            _check_model_spec(spec, f"eval.victims[{i}]")
    cfg[section][key] = value


def apply_override(cfg, dotted, source="command line"):
    """Apply one 'section.key=value' override; the value is parsed as YAML."""
    if "=" not in dotted:
        raise ConfigError(f"override {dotted!r} is not of the form section.key=value")
    path, raw = dotted.split("=", 1)
    if path.count(".") != 1:
        raise ConfigError(f"override key {path!r} is not of the form section.key")
    section, key = path.split(".")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as err:
        raise ConfigError(f"cannot parse override value {raw!r}: {err}") from err
    _set_key(cfg, section, key, value, source)


def load_config(path=None, overrides=(), env=None):
    """Resolve the full configuration from all layers, strictly validated."""
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        loaded = yaml.safe_load(path.read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must contain a mapping of sections")
        for section, values in loaded.items():
            _merge_section(cfg, section, values, str(path))
    env = os.environ if env is None else env
    for name, raw in sorted(env.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        if "_" not in rest:
            raise ConfigError(f"cannot parse environment variable {name}: no section_key split")
        section, key = rest.split("_", 1)
        _set_key(cfg, section, key, yaml.safe_load(raw), f"environment ({name})")
    for dotted in overrides:
        apply_override(cfg, dotted)
    return cfg


def save_config(cfg, path):
    """Write the resolved snapshot (valid input for --config)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg, sort_keys=True))
    return path


def train_config_from(cfg):
    """Assemble the trainer's config object from the resolved sections."""
    t = cfg["train"]
    return TrainConfig(
        learning_rate=float(t["learning_rate"]),
        betas=(float(t["beta1"]), float(t["beta2"])),
        batch_size=int(t["batch_size"]),
        epochs=int(t["epochs"]),
        mode=t["mode"],
        target=list(t["target"] or []),
        epsilon=float(cfg["attack"]["epsilon"]),
        seed=int(t["seed"]),
        checkpoint_dir=t["checkpoint_dir"],
        generator_width=int(cfg["generator"]["width"]),
        residual_blocks=int(cfg["generator"]["residual_blocks"]),
        grad_clip=None if t["grad_clip"] is None else float(t["grad_clip"]),
        deterministic=bool(t["deterministic"]),
        loss=LossConfig(
            tau=float(cfg["loss"]["tau"]),
            R=int(cfg["loss"]["R"]),
            queries_per_layer=int(cfg["loss"]["queries_per_layer"]),
            seed=int(t["seed"]),
            use_global=bool(cfg["loss"]["use_global"]),
            use_lpcl=bool(cfg["loss"]["use_lpcl"]),
        ),
    )
