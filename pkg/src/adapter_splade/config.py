"""Line-oriented ``key = value`` configuration with one section per module.

Precedence, lowest first: built-in preset, config file, environment
variables named ``ADAPTER_SPLADE__<SECTION>__<KEY>``, explicit
``section.key=value`` overrides.  Example file::

    [encoder]
    hidden_dim = 64
    num_layers = 2

    [train]
    learning_rate = 0.01
    bi_adapter = true
"""

from __future__ import annotations

import configparser
import dataclasses
import os
import types
import typing
from dataclasses import dataclass, field, fields
from typing import Any, Iterable, Mapping

from .encoder import AdapterConfig, EncoderConfig
from .objectives import RegularizerConfig
from .synthetic import SyntheticSpec
from .trainer import TrainConfig

ENV_PREFIX = "ADAPTER_SPLADE__"

TYPED_SECTIONS = {
    "encoder": EncoderConfig,
    "adapter": AdapterConfig,
    "train": TrainConfig,
    "regularizer": RegularizerConfig,
    "synthetic": SyntheticSpec,
}

# Desk-scale settings for the synthetic task (random frozen backbone, small dims).
DESK_PRESET: dict[str, dict[str, str]] = {
    "encoder": {"num_layers": "2", "hidden_dim": "64", "num_heads": "4", "ffn_dim": "128",
                "max_seq_len": "64"},
    "adapter": {"reduction_factor": "4"},
    "train": {"learning_rate": "0.01", "batch_size": "16", "iterations": "1500",
              "warmup_steps": "50", "eval_every": "500", "eval_dtype": "float32"},
    "regularizer": {"lambda_q": "0.01", "lambda_d": "0.01", "ramp_steps": "750"},
}

PRESETS = {"desk": DESK_PRESET, "defaults": {}}


class ConfigError(ValueError):
    pass


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(raw: str, hint, where: str):
    raw = raw.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        inner = [a for a in args if a is not type(None)]
        if type(None) in args and raw.lower() in ("none", "null", ""):
            return None
        return _coerce(raw, inner[0], where)
    if origin is tuple:
        item = args[0] if args else str
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        return tuple(_coerce(p, item, where) for p in parts)
    try:
        if hint is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {hint.__name__}") from None
    return raw


def build_section(cls, values: Mapping[str, str], section: str):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(unknown)}")
    kwargs = {k: _coerce(v, hints[k], f"{section}.{k}") for k, v in values.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


@dataclass
class Settings:
    encoder: EncoderConfig
    adapter: AdapterConfig
    train: TrainConfig
    regularizer: RegularizerConfig
    synthetic: SyntheticSpec
    raw: dict[str, dict[str, str]] = field(default_factory=dict)

    def get(self, section: str, key: str, default: Any = None, kind=str):
        value = self.raw.get(section, {}).get(key)
        if value is None:
            return default
        return _coerce(value, kind, f"{section}.{key}")

    def replace(self, section: str, **changes) -> "Settings":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **changes)})


def parse_override(text: str) -> tuple[str, str, str]:
    key, sep, value = text.partition("=")
    section, dot, name = key.strip().partition(".")
    if not sep or not dot or not section or not name:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    return section.lower(), name.strip(), value.strip()


def load_settings(path=None, overrides: Iterable[str] = (), env: Mapping[str, str] | None = None,
                  preset: str = "desk") -> Settings:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    raw: dict[str, dict[str, str]] = {s: dict(v) for s, v in PRESETS[preset].items()}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            raw.setdefault(section.lower(), {}).update(parser[section])
    env = os.environ if env is None else env
    for name, value in env.items():
        if name.startswith(ENV_PREFIX):
            section, _, key = name[len(ENV_PREFIX):].partition("__")
            if section and key:
                raw.setdefault(section.lower(), {})[key.lower()] = value
    for text in overrides:
        section, key, value = parse_override(text)
        raw.setdefault(section, {})[key] = value
    built = {s: build_section(cls, raw.get(s, {}), s) for s, cls in TYPED_SECTIONS.items()}
    return Settings(raw=raw, **built)


def dump_settings(settings: Settings) -> str:
    """Render every typed section in the file format accepted by :func:`load_settings`."""
    lines = []
    for section in TYPED_SECTIONS:
        lines.append(f"[{section}]")
        obj = getattr(settings, section)
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{f.name} = {v}")
        lines.append("")
    return "\n".join(lines)
