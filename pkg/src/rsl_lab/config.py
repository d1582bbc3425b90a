"""Experiment configuration: INI parsing, validation and canonical hashing."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import math
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import ConfigError, SyntheticTaskSpec
from .decoding import DecodeConfig, DecodeError
from .models import KINDS, L2R, R2L, ArchitectureSpec, SpecError, default_arch
from .rsl import RSLConfig
from .training import TrainConfig

ARCH_KEYS = ("d_model", "layers", "heads", "kernel", "ffn", "dropout", "max_target_len")


@dataclass(frozen=True)
class ModelEntry:
    kind: str
    direction: str
    seed: int

    @classmethod
    def parse(cls, text: str) -> "ModelEntry":
        parts = [p.strip() for p in text.split(":")]
        if len(parts) != 3:
            raise ConfigError(f"roster entry {text!r} is not kind:direction:seed")
        kind, direction, seed = parts
        if kind not in KINDS or direction not in (L2R, R2L):
            raise ConfigError(f"roster entry {text!r}: unknown architecture or direction")
        try:
            return cls(kind, direction, int(seed))
        except ValueError:
            raise ConfigError(f"roster entry {text!r}: seed must be an integer") from None


@dataclass
class EvalConfig:
    valid_fraction: float = 0.5      # share of the held-out split used for model selection


@dataclass
class ExperimentConfig:
    task: SyntheticTaskSpec = field(default_factory=lambda: SyntheticTaskSpec(heldout=400))
    roster: list[ModelEntry] = field(default_factory=lambda: [
        ModelEntry(k, d, 0) for k in KINDS for d in (L2R, R2L)])
    arch: dict[str, dict] = field(default_factory=dict)     # kind -> overrides
    train: TrainConfig = field(default_factory=TrainConfig)
    rsl: RSLConfig = field(default_factory=RSLConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def architecture(self, entry: ModelEntry) -> ArchitectureSpec:
        return default_arch(entry.kind, **{**self.arch.get("all", {}), **self.arch.get(entry.kind, {})})

    def validate(self) -> None:
        if not self.roster:
            raise ConfigError("model roster is empty")
        try:
            self.task.validate()
            self.train.validate()
            self.rsl.validate()
            self.decode.validate()
            for e in self.roster:
                self.architecture(e).validate()
        except (ValueError, SpecError, DecodeError) as exc:
            raise ConfigError(str(exc)) from None
        if self.rsl.k != len(self.roster):
            raise ConfigError(f"rsl.k = {self.rsl.k} but the roster lists {len(self.roster)} models")
        if not 0.0 < self.eval.valid_fraction < 1.0:
            raise ConfigError("eval.valid_fraction must lie in (0, 1)")

    def canonical(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def _convert(value: str, hint, where: str):
    text = value.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType) and type(None) in args:
        if text.lower() in ("none", ""):
            return None
        hint = next(a for a in args if a is not type(None))
    try:
        if hint is bool:
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return math.inf if text.lower() in ("inf", "infinity") else float(text)
        if hint is str:
            return text
        if origin is tuple:
            return tuple(s.strip() for s in text.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {getattr(hint, '__name__', hint)}") from None
    raise ConfigError(f"{where}: unsupported field type {hint}")


def _fill(cls, base, section: dict[str, str], name: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    updates = {}
    for key, raw in section.items():
        if key not in names:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        updates[key] = _convert(raw, hints[key], f"[{name}] {key}")
    return dataclasses.replace(base, **updates)


SECTIONS = {"task": SyntheticTaskSpec, "train": TrainConfig, "rsl": RSLConfig,
            "decode": DecodeConfig, "eval": EvalConfig}


def apply_overrides(parser: configparser.ConfigParser, overrides: list[str]) -> None:
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not section.key=value")
        lhs, value = item.split("=", 1)
        section, key = lhs.rsplit(".", 1)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, value)


def parse_config(text: str, overrides: list[str] | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    apply_overrides(parser, overrides or [])
    cfg = ExperimentConfig()
    for name in parser.sections():
        sec = dict(parser[name])
        if name in SECTIONS:
            setattr(cfg, name, _fill(SECTIONS[name], getattr(cfg, name), sec, name))
        elif name == "models":
            extra = set(sec) - {"roster"}
            if extra:
                raise ConfigError(f"[models] unknown key(s) {sorted(extra)}")
            if "roster" in sec:
                cfg.roster = [ModelEntry.parse(t) for t in sec["roster"].split(",") if t.strip()]
        elif name == "arch" or name.startswith("arch."):
            kind = "all" if name == "arch" else name[5:]
            if kind != "all" and kind not in KINDS:
                raise ConfigError(f"[{name}] unknown architecture")
            hints = typing.get_type_hints(ArchitectureSpec)
            over = {}
            for key, raw in sec.items():
                if key not in ARCH_KEYS:
                    raise ConfigError(f"[{name}] unknown key {key!r}")
                over[key] = _convert(raw, hints[key], f"[{name}] {key}")
            cfg.arch[kind] = over
        else:
            raise ConfigError(f"unknown section [{name}]")
    cfg.validate()
    return cfg


def load_config(path, overrides: list[str] | None = None) -> ExperimentConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), overrides)
