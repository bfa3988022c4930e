"""Run configuration: INI-style ``key = value`` sections with typed defaults.

Sections are ``data``, ``backbone``, ``patches``, ``attention``, ``aug`` and
``train``. Unknown sections or keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import os
from dataclasses import dataclass, field, fields
from typing import Any, Optional

from .augment import AugmentConfig
from .patches import GeometryError, build_patch_set


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    root: str = ""
    split_file: str = ""
    features_train: str = ""
    features_test: str = ""
    expect_classes: int = 0


@dataclass
class BackboneSection:
    kind: str = "reference_cnn"  # reference_cnn | imported
    widths: str = "16,32,64,128,128"

    def width_tuple(self) -> tuple[int, ...]:
        return tuple(int(v) for v in self.widths.split(","))


@dataclass
class PatchesSection:
    set: str = "P20"
    grid: int = 0  # 0 = the set's default grid (48 or 45)


@dataclass
class AttentionSection:
    c_a: int = 0  # 0 = max(c // 8, 16)
    include_self: bool = True
    use_ca: bool = True
    use_sa: bool = True
    sa_activation: str = "softmax"
    dropout: str = "gaussian"
    bn_momentum: float = 0.99
    bn_eps: float = 1e-5
    baseline_tokens: str = "positions"  # positions | whole


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    lr: float = 0.007
    lr_step: int = 50
    lr_decay: float = 0.1
    rho: float = 0.2
    mode: str = "scratch"  # scratch | frozen_features
    baseline: str = "none"  # none | gap | erase_gap | attention
    seed: int = 0
    precision: str = "float32"
    checkpoint_every: int = 10


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    patches: PatchesSection = field(default_factory=PatchesSection)
    attention: AttentionSection = field(default_factory=AttentionSection)
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    SECTIONS = ("data", "backbone", "patches", "attention", "aug", "train")

    def validate(self) -> "RunConfig":
        t = self.train
        if t.epochs < 1 or t.batch_size < 1 or t.lr <= 0 or t.lr_step < 1:
            raise ConfigError("train.epochs, train.batch_size, train.lr and train.lr_step must be positive")
        if not 0.0 < t.lr_decay < 1.0:
            raise ConfigError("train.lr_decay must lie in (0, 1)")
        if not 0.0 <= t.rho < 1.0:
            raise ConfigError("train.rho must satisfy 0 <= rho < 1")
        _choice("train.mode", t.mode, ("scratch", "frozen_features"))
        _choice("train.baseline", t.baseline, ("none", "gap", "erase_gap", "attention"))
        _choice("train.precision", t.precision, ("float32", "float64"))
        _choice("backbone.kind", self.backbone.kind, ("reference_cnn", "imported"))
        _choice("attention.sa_activation", self.attention.sa_activation, ("softmax", "sigmoid"))
        _choice("attention.dropout", self.attention.dropout, ("gaussian", "bernoulli", "none"))
        _choice("attention.baseline_tokens", self.attention.baseline_tokens, ("positions", "whole"))
        try:
            widths = self.backbone.width_tuple()
        except ValueError:
            raise ConfigError(f"backbone.widths must be comma-separated integers, got {self.backbone.widths!r}") from None
        if len(widths) != 5 or min(widths) < 1:
            raise ConfigError("backbone.widths needs five positive integers")
        if t.baseline == "none":
            try:
                build_patch_set(self.patches.set, self.patches.grid or None)
            except GeometryError as exc:
                raise ConfigError(f"patches: {exc}") from None
        try:
            # Re-run the augmentation checks on the (possibly overridden) values.
            AugmentConfig(**dataclasses.asdict(self.aug))
        except ValueError as exc:
            raise ConfigError(f"aug: {exc}") from None
        return self

    def to_ini(self) -> str:
        buf = io.StringIO()
        for name in self.SECTIONS:
            buf.write(f"[{name}]\n")
            for f in fields(getattr(self, name)):
                buf.write(f"{f.name} = {_format(getattr(getattr(self, name), f.name))}\n")
            buf.write("\n")
        return buf.getvalue()

    def config_hash(self) -> int:
        digest = hashlib.sha256(self.to_ini().encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")

    def copy(self) -> "RunConfig":
        return dataclasses.replace(
            self, **{name: dataclasses.replace(getattr(self, name)) for name in self.SECTIONS}
        )


def _choice(key: str, value: str, allowed: tuple) -> None:
    if value not in allowed:
        raise ConfigError(f"{key} must be one of {allowed}, got {value!r}")


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(key: str, raw: str, current: Any) -> Any:
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            parts = [p.strip() for p in raw.strip("()[] ").split(",") if p.strip()]
            if len(parts) != len(current):
                raise ValueError(raw)
            return tuple(type(c)(p) for c, p in zip(current, parts))
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(current).__name__}") from None
    return raw


def apply_setting(cfg: RunConfig, dotted: str, raw: str) -> None:
    if "." not in dotted:
        raise ConfigError(f"setting {dotted!r} must look like section.key")
    section, key = dotted.split(".", 1)
    if section not in RunConfig.SECTIONS:
        raise ConfigError(f"unknown config section {section!r}")
    obj = getattr(cfg, section)
    names = {f.name for f in fields(obj)}
    if key not in names:
        raise ConfigError(f"unknown config key {dotted!r}")
    setattr(obj, key, _parse(dotted, raw, getattr(obj, key)))


def load_config(path: Optional[str | os.PathLike] = None, overrides: Optional[list[str]] = None) -> RunConfig:
    """Defaults, then the config file (if any), then ``section.key=value`` overrides."""
    cfg = RunConfig()
    if path:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            for key, value in parser.items(section):
                apply_setting(cfg, f"{section}.{key}", value)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, value = item.split("=", 1)
        apply_setting(cfg, dotted.strip(), value)
    return cfg.validate()


def describe_keys() -> str:
    """All config keys with their defaults, for ``--help`` output."""
    cfg = RunConfig()
    lines = []
    for name in RunConfig.SECTIONS:
        for f in fields(getattr(cfg, name)):
            lines.append(f"  {name}.{f.name} = {_format(getattr(getattr(cfg, name), f.name))}")
    return "\n".join(lines)
