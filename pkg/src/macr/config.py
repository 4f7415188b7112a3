"""Experiment configuration: INI file with sections, every key also a CLI flag."""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields

from .dataset import SplitSpec
from .trainer import DEFAULT_C_GRID, TrainConfig

SECTIONS = {
    "data": ("data", "delimiter", "split_dir", "test_fraction", "valid_fraction", "split_seed"),
    "train": tuple(f.name for f in fields(TrainConfig)),
    "eval": ("ks", "mode", "c", "threads"),
    "analysis": ("n_bins", "bin_policy"),
    "output": ("out_dir",),
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    data: str = ""
    delimiter: str = "tab"
    split_dir: str = ""
    test_fraction: float = 0.1
    valid_fraction: float = 0.1
    split_seed: int = 2021
    train: TrainConfig = field(default_factory=TrainConfig)
    ks: tuple = (1, 5, 10, 15, 20)
    mode: str = "TIE"
    c: float | None = None
    threads: int = 1
    n_bins: int = 10
    bin_policy: str = "width"
    out_dir: str = "runs/default"

    @property
    def split_spec(self):
        return SplitSpec(self.test_fraction, self.valid_fraction, self.split_seed)

    @property
    def resolved_split_dir(self):
        return self.split_dir or os.path.join(self.out_dir, "split")

    @property
    def delimiter_char(self):
        return {"tab": "\t", "comma": ",", "space": None, "whitespace": None}.get(self.delimiter, self.delimiter)

    def flat(self):
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "train"}
        out.update(self.train.to_dict())
        return out

    def to_ini(self):
        flat = self.flat()
        parser = configparser.ConfigParser(interpolation=None)
        for section, keys in SECTIONS.items():
            parser[section] = {k: _format(flat[k]) for k in keys}
        return parser

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            self.to_ini().write(fh)


def _format(v):
    if v is None:
        return ""
    if isinstance(v, (list, tuple)):
        return ",".join(_format(x) for x in v)
    return str(v)


def _bool(s):
    s = str(s).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _parse_value(key, raw, default):
    if isinstance(raw, str):
        raw = raw.strip()
    try:
        if key == "c":
            return None if raw in ("", None) else float(raw)
        if key == "c_grid":
            return tuple(float(x) for x in str(raw).split(",") if x.strip()) if isinstance(raw, str) else tuple(raw)
        if key == "ks":
            return tuple(int(x) for x in str(raw).split(",") if x.strip()) if isinstance(raw, str) else tuple(raw)
        if isinstance(default, bool):
            return _bool(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return str(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def default_values():
    return ExperimentConfig().flat()


def build_config(values: dict) -> ExperimentConfig:
    """Assemble a config from flat key/values, filling defaults."""
    defaults = default_values()
    unknown = set(values) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    merged = dict(defaults)
    for k, v in values.items():
        merged[k] = _parse_value(k, v, defaults[k])
    train_keys = {f.name for f in fields(TrainConfig)}
    try:
        train = TrainConfig(**{k: merged[k] for k in train_keys})
        cfg = ExperimentConfig(train=train, **{k: v for k, v in merged.items() if k not in train_keys})
        cfg.split_spec  # validates fractions
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.mode.upper() not in ("TE", "TIE"):
        raise ConfigError(f"unknown mode {cfg.mode!r}; expected TE or TIE")
    cfg.mode = cfg.mode.upper()
    if not cfg.ks or min(cfg.ks) < 1:
        raise ConfigError("ks must be positive integers")
    return cfg


def read_ini(path) -> dict:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for k, v in parser[section].items():
            if k not in SECTIONS[section]:
                raise ConfigError(f"key {k!r} does not belong in [{section}]")
            values[k] = v
    return values


def load_config(path=None, overrides=None) -> ExperimentConfig:
    """Config file values, then CLI overrides on top."""
    values = read_ini(path) if path else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return build_config(values)


__all__ = ["ExperimentConfig", "ConfigError", "load_config", "build_config", "default_values", "DEFAULT_C_GRID"]
