"""Run configuration: one nested JSON document with a section per module.

Every field has a default, unknown keys are rejected with their full dotted
path, and :func:`canonical_json` gives the stable serialisation that the
config hash is computed over.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .adapt import AdaptPlan
from .asr import AsrConfig
from .lmfusion import DEFAULT_GRID, FusionConfig
from .tle import TleConfig
from .world import SpeakerDist, WorldConfig


class ConfigError(ValueError):
    """Invalid configuration; ``key`` is the dotted path at fault."""

    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


MATRIX_METHODS = ("none", "tle", "tts", "sf", "tts+sf", "tle+tts", "tle+tts+sf")


@dataclass
class EvalConfig:
    beam_size: int = 4
    methods: tuple = ("none", "tle", "tts", "tle+tts")
    corpora: tuple = ("target", "source")
    seeds: tuple = (0, 1, 2)

    def validate(self) -> None:
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if not self.methods or not self.corpora or not self.seeds:
            raise ValueError("methods, corpora and seeds must be non-empty")
        bad = [m for m in self.methods if m not in MATRIX_METHODS]
        if bad:
            raise ValueError(f"unknown method(s) {bad}; choose from {MATRIX_METHODS}")
        bad = [c for c in self.corpora if c not in ("target", "source")]
        if bad:
            raise ValueError(f"unknown corpora {bad}; choose from target, source")


SECTIONS = {
    "world": WorldConfig,
    "asr": AsrConfig,
    "tle": TleConfig,
    "adapt": AdaptPlan,
    "fusion": FusionConfig,
    "eval": EvalConfig,
}


@dataclass
class Config:
    world: WorldConfig = field(default_factory=WorldConfig)
    asr: AsrConfig = field(default_factory=AsrConfig)
    tle: TleConfig = field(default_factory=TleConfig)
    adapt: AdaptPlan = field(default_factory=AdaptPlan)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        for name in SECTIONS:
            try:
                getattr(self, name).validate()
            except ValueError as e:
                raise ConfigError(name, str(e)) from e
        w, a = self.world, self.asr
        pairs = [
            ("asr.feature_dim", a.feature_dim, w.feature_dim),
            ("asr.n_max", a.n_max, w.n_max),
            ("asr.l_max", a.l_max, w.l_max),
            ("tle.l_max", self.tle.l_max, a.l_max),
            ("tle.t_enc", self.tle.t_enc, a.t_enc),
            ("tle.h", self.tle.h, a.h),
            ("tle.k", self.tle.k, a.k),
            ("tle.vocab_size", self.tle.vocab_size, a.vocab_size),
        ]
        for key, got, want in pairs:
            if got != want:
                raise ConfigError(key, f"is {got} but must equal {want} to match the rest of the config")
        vocab = 3 + w.source_words + w.n_novel
        if a.vocab_size != vocab:
            raise ConfigError("asr.vocab_size", f"is {a.vocab_size} but the world defines {vocab} tokens")

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def hash(self) -> str:
        return config_hash(self)


def _plain(x: Any) -> Any:
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def canonical_json(cfg: Config | dict) -> str:
    d = cfg.to_dict() if isinstance(cfg, Config) else cfg
    return json.dumps(d, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: Config | dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def _coerce(key: str, default: Any, value: Any) -> Any:
    if dataclasses.is_dataclass(default):
        if not isinstance(value, dict):
            raise ConfigError(key, "expected an object")
        return _build(type(default), value, key)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key, f"expected a list, got {value!r}")
        return tuple(value)
    return value


def _build(cls: type, data: dict, prefix: str = "") -> Any:
    obj = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    for k, v in data.items():
        key = f"{prefix}.{k}" if prefix else k
        if k not in names:
            raise ConfigError(key, "unknown key")
        setattr(obj, k, _coerce(key, getattr(obj, k), v))
    return obj


def from_dict(data: dict) -> Config:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    cfg = _build(Config, data)
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> Config:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError("<root>", f"not valid JSON ({e})") from e
    return from_dict(data)


def save_config(cfg: Config, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n")


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def apply_overrides(cfg: Config, pairs: list) -> Config:
    """``section.field=value`` strings; values parse as JSON, else as plain strings."""
    data = cfg.to_dict()
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(pair, "override must look like section.field=value")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = {}
        cur = node
        parts = key.split(".")
        for p in parts[:-1]:
            cur[p] = {}
            cur = cur[p]
        cur[parts[-1]] = value
        data = _merge(data, node)
    return from_dict(data)


SMOKE = {
    "world": {
        "source_train": 64,
        "source_dev": 16,
        "source_test": 16,
        "target_train": 32,
        "target_dev": 8,
        "target_test": 16,
    },
    "adapt": {"base_steps": 50, "text_steps": 50, "tle_steps": 50, "warmup": 10, "tle_eval_every": 10},
    "fusion": {"grid": [0.1, 0.5]},
    "eval": {"beam_size": 2, "seeds": [0]},
}

PRESETS = {"default": {}, "smoke": SMOKE}


def preset(name: str = "default") -> Config:
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return from_dict(copy.deepcopy(PRESETS[name]))


__all__ = [
    "Config",
    "ConfigError",
    "EvalConfig",
    "MATRIX_METHODS",
    "PRESETS",
    "apply_overrides",
    "canonical_json",
    "config_hash",
    "from_dict",
    "load_config",
    "preset",
    "save_config",
]
