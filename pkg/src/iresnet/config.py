"""Run configuration: INI file with ``[model]``, ``[train]``, ``[augment]`` and ``[paths]``.

Every key is validated before any compute; unknown sections or keys are
rejected.  ``section.key=value`` overrides are applied on top of the file.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields

from .errors import ConfigError
from .model import ModelConfig, parse_fraction
from .training import AugmentParams, TrainConfig


def _floats(text, n=None):
    vals = tuple(float(v) for v in text.replace(" ", "").split(",") if v)
    if n is not None and len(vals) != n:
        raise ValueError(f"expected {n} comma-separated numbers")
    return vals


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true/false")


def _milestones(text):
    out = []
    for item in text.replace(" ", "").split(","):
        if not item:
            continue
        it, lr = item.split(":")
        out.append((int(it), float(lr)))
    return tuple(out)


def _crop(text):
    if text.strip().lower() in ("", "none"):
        return None
    h, w = (int(v) for v in text.split(","))
    return (h, w)


MODEL_KEYS = {
    "channel_mult": parse_fraction,
    "d_coarse": int,
    "d_fine": int,
    "refine_iters": int,
    "seed": int,
    "variant": str,
    "dtype": str,
}
TRAIN_KEYS = {
    "base_lr": float,
    "lr_milestones": _milestones,
    "max_iters": int,
    "batch_size": int,
    "loss_weights": lambda t: _floats(t, 7),
    "refine_weights": lambda t: _floats(t, 3),
    "refine_loss_weight": float,
    "seed": int,
    "checkpoint_every": int,
}
AUGMENT_KEYS = {
    "enabled": _bool,
    "crop": _crop,
    "hscale": lambda t: _floats(t, 2),
    "vshift": lambda t: tuple(int(v) for v in _floats(t, 2)),
    "brightness": lambda t: _floats(t, 2),
    "contrast": lambda t: _floats(t, 2),
    "color": lambda t: _floats(t, 2),
}
PATH_KEYS = {"data": str, "out": str}
SECTIONS = {"model": MODEL_KEYS, "train": TRAIN_KEYS, "augment": AUGMENT_KEYS, "paths": PATH_KEYS}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: dict = field(default_factory=dict)


def _parse_values(raw):
    """``{section: {key: text}}`` -> ``{section: {key: value}}`` with validation."""
    out = {}
    for section, items in raw.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]; expected one of {sorted(SECTIONS)}")
        keys = SECTIONS[section]
        out[section] = {}
        for key, text in items.items():
            if key not in keys:
                raise ConfigError(f"unknown config key {section}.{key}; expected one of {sorted(keys)}")
            try:
                out[section][key] = keys[key](text)
            except (ValueError, TypeError, ConfigError) as exc:
                raise ConfigError(f"bad value for {section}.{key}: {text!r} ({exc})") from exc
    return out


def parse_override(text):
    """``"section.key=value"`` -> ``(section, key, value)``."""
    name, sep, value = text.partition("=")
    section, dot, key = name.strip().partition(".")
    if not sep or not dot or not key:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    return section, key, value.strip()


def read_config_file(path):
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        with open(path) as f:
            parser.read_file(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return {s: dict(parser[s]) for s in parser.sections()}


def build_run_config(raw):
    values = _parse_values(raw)
    m = values.get("model", {})
    t = dict(values.get("train", {}))
    a = dict(values.get("augment", {}))
    enabled = a.pop("enabled", bool(a))
    try:
        model = ModelConfig(**m)
        aug = AugmentParams(**a) if enabled else None
        train = TrainConfig(augment=aug, **t)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(model, train, dict(values.get("paths", {})))


def load_run_config(path=None, overrides=()):
    """Read ``path`` (optional) and apply ``section.key=value`` overrides."""
    raw = read_config_file(path) if path else {}
    for text in overrides:
        section, key, value = parse_override(text)
        raw.setdefault(section, {})[key] = value
    return build_run_config(raw)


def _fmt(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ", ".join(f"{a}:{b!r}" for a, b in value)
        return ", ".join(repr(v) for v in value)
    return str(value)


def run_config_to_raw(run):
    raw = {"model": {}, "train": {}, "augment": {}, "paths": dict(run.paths)}
    for f in fields(ModelConfig):
        raw["model"][f.name] = _fmt(getattr(run.model, f.name))
    for key in TRAIN_KEYS:
        raw["train"][key] = _fmt(getattr(run.train, key))
    aug = run.train.augment
    raw["augment"]["enabled"] = _fmt(aug is not None)
    if aug is not None:
        for f in fields(AugmentParams):
            raw["augment"][f.name] = _fmt(getattr(aug, f.name))
    return raw


def write_run_config(path, run):
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, items in run_config_to_raw(run).items():
        parser[section] = {k: v for k, v in items.items() if v is not None}
    try:
        with open(path, "w") as f:
            parser.write(f)
    except OSError as exc:
        raise ConfigError(f"cannot write config {path}: {exc}") from exc
