"""Run configuration files.

INI-style text with four sections, ``[model]``, ``[lora]``, ``[train]`` and
``[data]``; every key mirrors a config dataclass field. Unknown sections or
keys are errors. Values given on the command line as ``section.key=value``
override the file.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .lora import LoraConfig
from .train import TrainConfig
from .vit import ModelConfig


@dataclass(frozen=True)
class DataConfig:
    train_manifest: str = ""
    val_manifest: str = ""
    test_manifest: str = ""
    out_dir: str = "runs"
    tile_size: int = 512
    split_ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    split_seed: int = 0
    histogram_sample: int = 1038


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    source: str | None = None


SECTIONS = {"model": ModelConfig, "lora": LoraConfig, "train": TrainConfig, "data": DataConfig}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(section: str, key: str, default, text: str):
    """Parse ``text`` into the type of ``default`` for ``section.key``."""
    text = text.strip()
    if section == "lora" and key == "alpha":
        return None if text.lower() in ("", "none") else float(text)
    if section == "lora" and key == "targets":
        return tuple(t.strip() for t in text.split(",") if t.strip())
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text.replace("_", ""))
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(float(t) for t in text.split(",") if t.strip())
    return text


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def _build(section: str, values: dict[str, str], where: str):
    cls = SECTIONS[section]
    defaults = cls()
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, text in values.items():
        if key not in known:
            raise ConfigError(f"{where}: unknown key [{section}] {key}")
        try:
            kwargs[key] = _coerce(section, key, getattr(defaults, key), text)
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for [{section}] {key}: {exc}") from None
    try:
        return replace(defaults, **kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_overrides(items) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        if section not in SECTIONS:
            raise ConfigError(f"override {item!r}: unknown section [{section}]")
        out.setdefault(section, {})[name] = value
    return out


def load_run_config(path: str | os.PathLike | None = None, overrides=None) -> RunConfig:
    raw: dict[str, dict[str, str]] = {s: {} for s in SECTIONS}
    where = "<defaults>"
    if path is not None:
        path = Path(path)
        where = str(path)
        parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
        parser.optionxform = str  # keys are case-sensitive
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc.strerror or exc})") from exc
        except configparser.Error as exc:
            raise ConfigError(f"{path}: malformed config ({exc})") from exc
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"{path}: unknown section [{section}]")
            raw[section].update(parser[section])
    for section, values in parse_overrides(overrides).items():
        raw[section].update(values)
    built = {s: _build(s, raw[s], where) for s in SECTIONS}
    return RunConfig(**built, source=where)


def dump_config(cfg: RunConfig | None = None) -> str:
    cfg = cfg or RunConfig()
    lines = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        lines.append(f"[{section}]")
        for f in fields(obj):
            lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)
