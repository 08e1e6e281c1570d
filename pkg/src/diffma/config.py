"""Run configuration: dotted ``section.key = value`` text, values in JSON.

Every effective value is either supplied by the user or a default defined
here, and the resolved snapshot written to a run directory is enough to
reproduce the run.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .errors import ConfigError
from .model import PRESET_LAYERS, ModelConfig


@dataclass
class ModelSection:
    preset: str = "tiny"  # tiny | S | B | L | XL | XXL | custom
    layers: int = 4
    patch_size: int = 2
    dim: int = 128
    state_size: int = 16
    latent_shape: list = field(default_factory=lambda: [4, 16, 16])
    external_tokens: int = 196


@dataclass
class DataSection:
    count: int = 512
    holdout: int = 32
    resolution: int = 128
    seed: int = 0


@dataclass
class ScheduleSection:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2


@dataclass
class OptimSection:
    lr: float = 3e-3
    weight_decay: float = 0.0
    batch_size: int = 16
    steps: int = 2000


@dataclass
class EmaSection:
    decay: float = 0.999
    warmup: bool = True


@dataclass
class EmbedderSection:
    steps: int = 300
    batch_size: int = 16
    lr: float = 1e-4


@dataclass
class SampleSection:
    steps: int = 50
    clip_x0: float = 1.0
    batch_size: int = 16


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    optim: OptimSection = field(default_factory=OptimSection)
    ema: EmaSection = field(default_factory=EmaSection)
    embedder: EmbedderSection = field(default_factory=EmbedderSection)
    sample: SampleSection = field(default_factory=SampleSection)

    def model_config(self) -> ModelConfig:
        m = self.model
        if m.preset in PRESET_LAYERS and m.layers != PRESET_LAYERS[m.preset]:
            raise ConfigError(f"preset {m.preset} has {PRESET_LAYERS[m.preset]} layers, config says {m.layers}")
        return ModelConfig(
            layers=m.layers, patch_size=m.patch_size, dim=m.dim, state_size=m.state_size,
            latent_shape=tuple(m.latent_shape), external_tokens=m.external_tokens,
        )

    def flat(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if is_dataclass(v):
                for k, sub in asdict(v).items():
                    out[f"{f.name}.{k}"] = sub
            else:
                out[f.name] = v
        return out

    def set(self, key: str, value) -> None:
        parts = key.split(".")
        target = self
        for p in parts[:-1]:
            if not hasattr(target, p):
                raise ConfigError(f"unknown config section {p!r} in {key!r}")
            target = getattr(target, p)
        leaf = parts[-1]
        names = {f.name: f for f in fields(target)}
        if leaf not in names or is_dataclass(getattr(target, leaf)):
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(target, leaf)
        if isinstance(current, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{key} must be true/false, got {value!r}")
        elif isinstance(current, int) and not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        elif isinstance(current, float) and isinstance(value, int):
            value = float(value)
        elif isinstance(current, float) and not isinstance(value, float):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        setattr(target, leaf, value)

    def dumps(self) -> str:
        return "".join(f"{k} = {json.dumps(v)}\n" for k, v in self.flat().items())

    def write(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip() if not line.lstrip().startswith('"') else line.strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            cfg.set(key, parse_value(raw, f"line {lineno}"))
        return cfg

    @classmethod
    def read(cls, path) -> "RunConfig":
        return cls.loads(Path(path).read_text())


def parse_value(raw: str, where: str = "value"):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        # bare words are accepted as strings: preset = B
        if raw and all(ch.isalnum() or ch in "-_." for ch in raw):
            return raw
        raise ConfigError(f"{where}: cannot parse {raw!r}") from None


def preset_config(name: str, patch_size: int = 2) -> RunConfig:
    """Defaults for a named model size; ``tiny`` is the desk-scale smoke preset."""
    cfg = RunConfig()
    if name == "tiny":
        return cfg
    if name not in PRESET_LAYERS:
        raise ConfigError(f"unknown preset {name!r}")
    cfg.model = ModelSection(preset=name, layers=PRESET_LAYERS[name], patch_size=patch_size,
                             dim=512, latent_shape=[4, 28, 28])
    cfg.data.resolution = 224
    cfg.optim = OptimSection(lr=1e-4, batch_size=8)
    cfg.ema = EmaSection(decay=0.9999, warmup=False)
    return cfg
