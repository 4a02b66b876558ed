"""Flat ``section.key = value`` run configuration.

Every typed config of the package appears under one section; unknown keys
are rejected. Values use a small textual codec: booleans are ``true`` /
``false``, tuples are comma separated and nested tuples join their items with
``:`` (a text conv layer ``kernel:channels:pool`` for example).
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .dataset import SceneSpec
from .labeling import LabelConfig
from .model import ModelConfig, TextPathwayConfig, VisualPathwayConfig
from .training import LearningRates, LossWeights, SamplingConfig, TrainConfig


class ConfigError(ValueError):
    """Malformed or unknown configuration entry."""


@dataclass(frozen=True)
class RunOptions:
    seed: int = 0
    head_bias: bool = True
    data_dir: str = "data"
    run_dir: str = "runs/default"
    n_train: int = 500
    n_val: int = 0
    n_test: int = 100
    steps: int = 2000
    checkpoint_every: int = 500
    nms_iou: float = 0.3
    top_k: int = 10
    query_seed: int = 0


SECTIONS: dict[str, type] = {
    "run": RunOptions,
    "data": SceneSpec,
    "labels": LabelConfig,
    "loss": LossWeights,
    "sampling": SamplingConfig,
    "rates": LearningRates,
    "text": TextPathwayConfig,
    "visual": VisualPathwayConfig,
}


@dataclass(frozen=True)
class RunConfig:
    run: RunOptions = field(default_factory=RunOptions)
    data: SceneSpec = field(default_factory=SceneSpec)
    labels: LabelConfig = field(default_factory=LabelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    rates: LearningRates = field(default_factory=LearningRates)
    text: TextPathwayConfig = field(default_factory=TextPathwayConfig)
    visual: VisualPathwayConfig = field(default_factory=VisualPathwayConfig)

    @property
    def train(self) -> TrainConfig:
        return TrainConfig(self.labels, self.loss, self.sampling, self.rates)

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(self.text, self.visual, self.run.head_bias)

    def items(self) -> list[tuple[str, str]]:
        out = []
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                out.append((f"{section}.{f.name}", encode_value(getattr(obj, f.name))))
        return out

    def serialize(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.items())

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.serialize())

    def with_overrides(self, pairs: Iterable[tuple[str, str]]) -> "RunConfig":
        updates: dict[str, dict[str, Any]] = {}
        for key, raw in pairs:
            section, name = _split_key(key)
            default = _field_default(section, name, getattr(self, section))
            updates.setdefault(section, {})[name] = decode_value(raw, default, key)
        kwargs = {}
        for section, changes in updates.items():
            try:
                kwargs[section] = dataclasses.replace(getattr(self, section), **changes)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid values in section '{section}': {exc}") from exc
        return dataclasses.replace(self, **kwargs)


def _split_key(key: str) -> tuple[str, str]:
    section, _, name = key.strip().partition(".")
    if section not in SECTIONS or not name:
        raise ConfigError(f"unknown config key '{key.strip()}'")
    return section, name


def _field_default(section: str, name: str, current) -> Any:
    names = {f.name for f in dataclasses.fields(SECTIONS[section])}
    if name not in names:
        raise ConfigError(f"unknown config key '{section}.{name}'")
    return getattr(current, name)


# -- value codec ---------------------------------------------------------------------------

def encode_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(":".join(_atom(x) for x in item) if isinstance(item, tuple) else _atom(item)
                        for item in v)
    return str(v)


def _atom(x: Any) -> str:
    return encode_value(x)


def _parse_atom(s: str) -> Any:
    s = s.strip()
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s


def decode_value(raw: str, default: Any, key: str = "?") -> Any:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError("expected true or false")
            return raw.lower() == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            if not raw:
                return ()
            return tuple(tuple(_parse_atom(p) for p in item.split(":")) if ":" in item
                         else _parse_atom(item) for item in raw.split(","))
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for '{key}': {raw!r} ({exc})") from exc


# -- files ------------------------------------------------------------------------------------

def parse_lines(text: str) -> list[tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    return (base or RunConfig()).with_overrides(parse_lines(text))


def load_config(path: str | os.PathLike | None, overrides: Iterable[str] = ()) -> RunConfig:
    """Defaults, then the file at ``path`` (if any), then ``key=value`` overrides."""
    cfg = RunConfig()
    if path is not None:
        cfg = parse_config(Path(path).read_text(), cfg)
    pairs = []
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs.append((k, v))
    return cfg.with_overrides(pairs)
