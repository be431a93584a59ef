"""Flat key=value run configuration.

One option per line, ``#`` starts a comment, blank lines are ignored.
Nested groups are spelled with a dot prefix: ``weights.alpha=10`` sets the
penalty coefficient, ``net.base_width=8`` an architecture knob.  Unknown
keys, duplicate keys, and unparseable values are all rejected with messages
naming the offending key, so a typo can never silently fall back to a
default.
"""

from __future__ import annotations

import typing
from dataclasses import fields

from .losses import LossWeights
from .networks import NetConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """A configuration file, key, or value is invalid."""


_BOOL_WORDS = {
    "true": True,
    "yes": True,
    "1": True,
    "false": False,
    "no": False,
    "0": False,
}


def _scalar_types(cls, skip=()) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls) if f.name not in skip}


_TOP_TYPES = _scalar_types(TrainConfig, skip=("weights", "net"))
_WEIGHT_TYPES = _scalar_types(LossWeights)
_NET_TYPES = _scalar_types(NetConfig)


def _convert(key: str, raw: str, typ):
    try:
        if typ is bool:
            word = raw.strip().lower()
            if word not in _BOOL_WORDS:
                raise ValueError(raw)
            return _BOOL_WORDS[word]
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        if typ is tuple:
            parts = [p for p in raw.split(",") if p.strip() != ""]
            if not parts:
                raise ValueError(raw)
            return tuple(int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"config key '{key}': cannot parse {raw!r} as {typ.__name__}") from None
    raise ConfigError(f"config key '{key}' has unsupported type {typ!r}")


def parse_pairs(text: str) -> dict:
    """key=value lines -> {key: raw string}; rejects malformed and duplicate keys."""
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"config line {lineno}: expected key=value, got {line.strip()!r}")
        key, value = body.split("=", 1)
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigError(f"config line {lineno}: empty key")
        if key in pairs:
            raise ConfigError(f"config line {lineno}: duplicate key '{key}'")
        pairs[key] = value
    return pairs


def train_config_from_pairs(pairs: dict) -> TrainConfig:
    """Typed TrainConfig from raw string pairs; unknown keys are rejected.

    net.patch follows the top-level patch unless set explicitly, so a config
    that only says ``patch=4,16,16`` stays geometrically consistent.
    """
    top, weight_kw, net_kw = {}, {}, {}
    unknown = []
    for key, raw in pairs.items():
        if key in _TOP_TYPES:
            top[key] = _convert(key, raw, _TOP_TYPES[key])
        elif key.startswith("weights.") and key[8:] in _WEIGHT_TYPES:
            name = key[8:]
            weight_kw[name] = _convert(key, raw, _WEIGHT_TYPES[name])
        elif key.startswith("net.") and key[4:] in _NET_TYPES:
            name = key[4:]
            net_kw[name] = _convert(key, raw, _NET_TYPES[name])
        else:
            unknown.append(key)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    try:
        kwargs = dict(top)
        kwargs["weights"] = LossWeights(**weight_kw)
        if net_kw:
            net_kw.setdefault("patch", tuple(top.get("patch", TrainConfig.__dataclass_fields__["patch"].default)))
            kwargs["net"] = NetConfig(**net_kw)
        return TrainConfig(**kwargs)
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from None


def train_config_from_text(text: str) -> TrainConfig:
    return train_config_from_pairs(parse_pairs(text))


def load_train_config(path) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return train_config_from_text(fh.read())


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def train_config_to_text(cfg: TrainConfig) -> str:
    """Complete, order-stable snapshot; parsing it back reproduces cfg."""
    lines = []
    for name in sorted(_TOP_TYPES):
        lines.append(f"{name}={_format_value(getattr(cfg, name))}")
    for name in sorted(_WEIGHT_TYPES):
        lines.append(f"weights.{name}={_format_value(getattr(cfg.weights, name))}")
    for name in sorted(_NET_TYPES):
        lines.append(f"net.{name}={_format_value(getattr(cfg.net, name))}")
    return "\n".join(lines) + "\n"
