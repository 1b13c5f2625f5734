"""Run configuration: a ``key = value`` file with [spec], [train] and [augment] sections.

Every key is optional; missing keys take the defaults below.  Command-line
flags override file values.  ``resolved_text`` renders the fully resolved
configuration in a canonical form whose SHA-256 is recorded in ``run.txt``.

[spec]
    preset        desk | full                           (desk)
    input_width   desk preset only                      (76)
    input_height  desk preset only                      (57)
    dropout       desk preset only                      (0.5)
    lr_mult.NAME  per-layer multiplier, e.g. lr_mult.coarse6 = 0.1

[train]
    batch_size, momentum, lr, coarse_samples, fine_samples, lam, seed,
    workers, checkpoint_every, fine_init, dtype        (see TrainConfig)

[augment]
    enabled       true | false                          (true)
    preset        nyu | kitti                           (nyu)
    scale_min, scale_max, rotation_deg, rotate, color_min, color_max, flip_prob
"""

from __future__ import annotations

import configparser
import hashlib
import os
from dataclasses import dataclass, field, fields, replace

from .augment import AugmentParams
from .model import NetworkSpec, desk_spec, full_spec
from .training import TrainConfig


class ConfigError(ValueError):
    pass


_TRAIN_TYPES = {f.name: f.type for f in fields(TrainConfig)}
_TRAIN_KEYS = ("batch_size", "momentum", "lr", "coarse_samples", "fine_samples", "lam", "seed",
               "workers", "checkpoint_every", "fine_init", "dtype")
_AUGMENT_KEYS = ("enabled", "preset", "scale_min", "scale_max", "rotation_deg", "rotate",
                 "color_min", "color_max", "flip_prob")


@dataclass
class RunConfig:
    preset: str = "desk"
    input_width: int = 76
    input_height: int = 57
    dropout: float = 0.5
    lr_mults: dict[str, float] = field(default_factory=dict)
    train: dict[str, object] = field(default_factory=dict)
    augment: dict[str, object] = field(default_factory=dict)

    def spec(self) -> NetworkSpec:
        if self.preset == "desk":
            spec = desk_spec(self.input_width, self.input_height, self.dropout)
        elif self.preset == "full":
            spec = full_spec()
        else:
            raise ConfigError(f"unknown spec preset {self.preset!r}")
        unknown = set(self.lr_mults) - {n for s in ("coarse", "fine") for n, _ in spec.learned_layers(s)}
        if unknown:
            raise ConfigError(f"lr_mult for unknown layers: {sorted(unknown)}")
        return spec.with_lr_mults(self.lr_mults) if self.lr_mults else spec

    def augment_params(self) -> AugmentParams | None:
        a = self.augment
        if not _bool(a.get("enabled", True)):
            return None
        spec = self.spec()
        preset = a.get("preset", "nyu")
        if preset not in ("nyu", "kitti"):
            raise ConfigError(f"unknown augment preset {preset!r}")
        base = getattr(AugmentParams, preset)(spec.input_height, spec.input_width)
        try:
            return replace(
                base,
                scale=(float(a.get("scale_min", base.scale[0])), float(a.get("scale_max", base.scale[1]))),
                rotation_deg=float(a.get("rotation_deg", base.rotation_deg)),
                rotate=_bool(a.get("rotate", base.rotate)),
                color=(float(a.get("color_min", base.color[0])), float(a.get("color_max", base.color[1]))),
                flip_prob=float(a.get("flip_prob", base.flip_prob)),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self, rgb_mean=(0.0, 0.0, 0.0)) -> TrainConfig:
        kw = {}
        for key, raw in self.train.items():
            kind = _TRAIN_TYPES[key]
            try:
                kw[key] = int(raw) if kind == "int" else float(raw) if kind == "float" else str(raw)
            except ValueError as exc:
                raise ConfigError(f"[train] {key}: {exc}") from exc
        try:
            return TrainConfig(augment=self.augment_params(), rgb_mean=tuple(rgb_mean), **kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def override(self, section: str, key: str, value) -> None:
        """Apply a command-line override."""
        if value is None:
            return
        if section == "train":
            if key not in _TRAIN_KEYS:
                raise ConfigError(f"unknown [train] key {key!r}")
            self.train[key] = value
        elif section == "augment":
            self.augment[key] = value
        else:
            setattr(self, key, value)

    def resolved_text(self) -> str:
        """Canonical rendering of every effective setting."""
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp["spec"] = {"preset": self.preset, "input_width": str(self.input_width),
                      "input_height": str(self.input_height), "dropout": repr(float(self.dropout)),
                      **{f"lr_mult.{k}": repr(float(v)) for k, v in sorted(self.lr_mults.items())}}
        tc = self.train_config()
        cp["train"] = {k: str(getattr(tc, k)) for k in _TRAIN_KEYS}
        aug = tc.augment
        if aug is None:
            cp["augment"] = {"enabled": "false"}
        else:
            cp["augment"] = {"enabled": "true", "scale_min": repr(aug.scale[0]), "scale_max": repr(aug.scale[1]),
                             "rotation_deg": repr(aug.rotation_deg), "rotate": str(aug.rotate).lower(),
                             "color_min": repr(aug.color[0]), "color_max": repr(aug.color[1]),
                             "flip_prob": repr(aug.flip_prob)}
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in cp[section].items())
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.resolved_text().encode("utf-8")).hexdigest()


def _bool(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    extra = set(cp.sections()) - {"spec", "train", "augment"}
    if extra:
        raise ConfigError(f"unknown config sections: {sorted(extra)}")
    try:
        return _from_parser(cp)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad config value: {exc}") from exc


def _from_parser(cp: configparser.ConfigParser) -> RunConfig:
    cfg = RunConfig()
    if cp.has_section("spec"):
        for key, value in cp["spec"].items():
            if key.startswith("lr_mult."):
                cfg.lr_mults[key[len("lr_mult."):]] = float(value)
            elif key == "preset":
                cfg.preset = value
            elif key in ("input_width", "input_height"):
                setattr(cfg, key, int(value))
            elif key == "dropout":
                cfg.dropout = float(value)
            else:
                raise ConfigError(f"unknown [spec] key {key!r}")
    if cp.has_section("train"):
        for key, value in cp["train"].items():
            if key not in _TRAIN_KEYS:
                raise ConfigError(f"unknown [train] key {key!r}")
            cfg.train[key] = value
    if cp.has_section("augment"):
        for key, value in cp["augment"].items():
            if key not in _AUGMENT_KEYS:
                raise ConfigError(f"unknown [augment] key {key!r}")
            cfg.augment[key] = value
    return cfg


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text)
