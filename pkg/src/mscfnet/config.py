"""Plain-text run configuration: ``key = value`` lines, ``#`` comments.

Keys mirror :class:`NetworkConfig` and :class:`TrainConfig`, plus ``preset``
which selects the starting network before overrides. Tuples are comma
separated; booleans accept true/false/on/off/yes/no/1/0.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .network import NetworkConfig, get_preset
from .train import TrainConfig


class ConfigError(ValueError):
    pass


_TUPLE_INT = {"stage_widths", "ear_counts", "dilation_schedule_1", "dilation_schedule_2"}
_BOOLS = {"spatial_attention"}
_TRUE, _FALSE = {"true", "on", "yes", "1"}, {"false", "off", "no", "0"}
NET_KEYS = [f.name for f in fields(NetworkConfig)]
TRAIN_KEYS = [f.name for f in fields(TrainConfig)]


@dataclass
class RunConfig:
    network: NetworkConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    preset: Optional[str] = None


def _convert(key: str, raw: str, ftype, lineno: int):
    try:
        if key in _TUPLE_INT:
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if key == "branch_levels":
            return tuple(v.strip() for v in raw.split(",") if v.strip())
        if key in _BOOLS:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if ftype in (int, "int"):
            return int(raw)
        if ftype in (float, "float"):
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"line {lineno}: bad value for {key}: {e}") from None


def parse_run_config(text: str, default_preset: str = "final") -> RunConfig:
    net_over, train_over, preset = {}, {}, None
    net_types = {f.name: f.type for f in fields(NetworkConfig)}
    train_types = {f.name: f.type for f in fields(TrainConfig)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key == "preset":
            preset = raw
        elif key in net_types:
            net_over[key] = _convert(key, raw, net_types[key], lineno)
        elif key in train_types:
            train_over[key] = _convert(key, raw, train_types[key], lineno)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    try:
        base = get_preset(preset or default_preset)
    except KeyError as e:
        raise ConfigError(e.args[0]) from None
    try:
        net = replace(base, **net_over)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"invalid network configuration: {e}") from None
    train = replace(TrainConfig(), **train_over)
    if train.optimizer not in ("adam", "sgd"):
        raise ConfigError(f"unknown optimizer {train.optimizer!r}")
    return RunConfig(net, train, preset)


def load_run_config(path, default_preset: str = "final") -> RunConfig:
    return parse_run_config(Path(path).read_text(), default_preset)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def format_run_config(rc: RunConfig) -> str:
    lines = ["# network"]
    lines += [f"{k} = {_fmt(v)}" for k, v in asdict(rc.network).items()]
    lines.append("# training")
    lines += [f"{k} = {_fmt(v)}" for k, v in asdict(rc.train).items()]
    return "\n".join(lines) + "\n"
