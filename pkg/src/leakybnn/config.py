"""Experiment configuration: dataclasses plus a dotted ``key = value`` file format.

Grammar, one assignment per line::

    # comment
    data.name = mnist
    model.hidden = 64, 64
    sweep.slopes = -0.5, 0

Keys are ``section.field``.  Values are parsed by the field's declared type:
ints, floats, ``true``/``false``, bare strings, or comma-separated tuples.
Command-line overrides use the same ``key=value`` syntax and win over the file.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .nn import Architecture, convnet, mlp
from .training import TrainConfig

DEFAULT_SLOPES = tuple(float(v) for v in np.linspace(-1.0, 1.0, 17))


@dataclass
class DataConfig:
    name: str = "mnist"
    dir: str = "data/mnist"
    train_n: int = 600
    val_n: int = 2000


@dataclass
class ModelConfig:
    kind: str = "mlp"
    hidden: tuple[int, ...] = (64, 64)
    channels: tuple[int, ...] = (8, 16)
    kernel: int = 3


@dataclass
class SweepConfig:
    slopes: tuple[float, ...] = DEFAULT_SLOPES
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)


@dataclass
class ProbeConfig:
    layer: int = 1
    weights: int = 20
    seed: int = 0
    n_points: int = 256
    half_width: float = 3.0
    flat_tol: float = 1e-9
    near_frac: float = 0.25
    probe_bound: bool = True
    verify: bool = True


@dataclass
class DecalConfig:
    slopes: tuple[float, ...] = (0.0, -0.5)
    tail: int = 1  # late-training ECE = mean over the last `tail` epochs


@dataclass
class RunConfig:
    out: str = "runs"
    mode: str = "mfvi"


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    decal: DecalConfig = field(default_factory=DecalConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def validate(self) -> None:
        if self.data.name not in ("mnist", "fmnist"):
            raise ConfigError(f"data.name must be mnist or fmnist, got {self.data.name!r}")
        if self.model.kind not in ("mlp", "conv"):
            raise ConfigError(f"model.kind must be mlp or conv, got {self.model.kind!r}")
        for key, slopes in (("sweep.slopes", self.sweep.slopes), ("decal.slopes", self.decal.slopes)):
            bad = [s for s in slopes if not -1.0 <= s <= 1.0]
            if bad:
                raise ConfigError(f"{key}: slopes {bad} outside [-1, 1]")
        if not self.sweep.seeds:
            raise ConfigError("sweep.seeds must not be empty")
        if self.run.mode not in ("map", "mfvi"):
            raise ConfigError("run.mode must be map or mfvi")

    def architecture(self) -> Architecture:
        if self.model.kind == "mlp":
            return mlp(self.model.hidden)
        return convnet(self.model.channels, self.model.kernel)

    def model_name(self) -> str:
        if self.model.kind == "mlp":
            return "mlp-" + "-".join(str(h) for h in self.model.hidden)
        return "conv-" + "-".join(str(c) for c in self.model.channels)


def _parse_scalar(text: str, typ, key: str):
    text = text.strip()
    try:
        if typ is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {typ.__name__}") from None


def _parse_value(text: str, typ, key: str):
    if typing.get_origin(typ) is tuple:
        (inner, *_) = typing.get_args(typ)
        items = [t for t in text.split(",") if t.strip()]
        return tuple(_parse_scalar(t, inner, key) for t in items)
    return _parse_scalar(text, typ, key)


def apply(cfg: ExperimentConfig, key: str, value: str) -> None:
    parts = key.strip().split(".")
    if len(parts) != 2:
        raise ConfigError(f"config keys look like section.field, got {key!r}")
    section, name = parts
    target = getattr(cfg, section, None)
    if target is None or not dataclasses.is_dataclass(target):
        raise ConfigError(f"unknown config section {section!r}")
    hints = typing.get_type_hints(type(target))
    if name not in hints:
        raise ConfigError(f"unknown config key {key!r}")
    setattr(target, name, _parse_value(value, hints[name], key))


def parse_lines(lines, cfg: ExperimentConfig | None = None, source: str = "<config>") -> ExperimentConfig:
    cfg = cfg or ExperimentConfig()
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        try:
            apply(cfg, key, value)
        except ConfigError as e:
            raise ConfigError(f"{source}:{lineno}: {e}") from None
    return cfg


def load_config(path=None, overrides=()) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        parse_lines(path.read_text().splitlines(), cfg, str(path))
    parse_lines(overrides, cfg, "<command line>")
    # re-run TrainConfig's own checks on the final values
    cfg.train = TrainConfig(**dataclasses.asdict(cfg.train))
    cfg.validate()
    return cfg


def dump(cfg: ExperimentConfig) -> str:
    lines = []
    for section in dataclasses.fields(cfg):
        obj = getattr(cfg, section.name)
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{section.name}.{f.name} = {v}")
    return "\n".join(lines) + "\n"
