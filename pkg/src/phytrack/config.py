"""Flat ``key=value`` run configuration shared by all commands."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .data_synth import ConfigError, SequenceConfig, TIER_KINDS
from .model import ModelConfig
from .tracker import TrackerConfig
from .train import TrainConfig


@dataclass
class RunConfig:
    # sequence synthesis
    width: int = 160
    height: int = 96
    num_frames: int = 150
    num_classes: int = 6
    spawn_rate: float = 0.09
    flow_velocity: float = 3.0
    jitter_sigma: float = 0.4
    size_min: float = 11.0
    size_max: float = 18.0
    impurity_density: float = 0.6
    # dataset splits (frames per split video at 1/60 of 9000/1800/1200)
    train_sequences: int = 3
    val_sequences: int = 3
    test_sequences: int = 3
    val_frames: int = 30
    test_frames: int = 20
    tiers: tuple[str, ...] = ("easy", "medium", "hard")
    # tracker
    score_threshold: float = 0.4
    gate_radius: float = 0.0
    max_age: int = 5
    min_hits: int = 2
    # model
    widths: tuple[int, ...] = (16, 32, 64, 64)
    feature_channels: int = 64
    assoc_channels: int = 64
    head_channels: int = 32
    srm_mode: str = "paper"
    memory_mode: str = "mean"
    temperature: float = 0.05
    # training
    epochs: int = 60
    batch_size: int = 5
    lr: float = 2.5e-4
    decay_epochs: tuple[int, ...] = (40, 50)
    decay_factor: float = 0.1
    cva_weight: float = 1.0
    flip_prob: float = 0.5
    affine_prob: float = 0.3
    samples_per_epoch: int = 0
    # reproducibility
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        for tier in self.tiers:
            if tier not in TIER_KINDS:
                raise ConfigError(f"tiers: unknown tier {tier!r}")
        if len(self.widths) != 4:
            raise ConfigError("widths: expected four comma-separated channel counts")

    def sequence(self, seed: int, num_frames: int | None = None) -> SequenceConfig:
        return SequenceConfig(
            width=self.width, height=self.height, num_frames=num_frames or self.num_frames,
            num_classes=self.num_classes, spawn_rate=self.spawn_rate, flow_velocity=self.flow_velocity,
            jitter_sigma=self.jitter_sigma, size_min=self.size_min, size_max=self.size_max,
            impurity_density=self.impurity_density, seed=seed,
        )

    def model(self) -> ModelConfig:
        return ModelConfig(
            widths=tuple(self.widths), feature_channels=self.feature_channels,
            assoc_channels=self.assoc_channels, head_channels=self.head_channels,
            num_classes=self.num_classes, srm_mode=self.srm_mode, memory_mode=self.memory_mode,
            temperature=self.temperature,
        )

    def tracker(self) -> TrackerConfig:
        return TrackerConfig(self.score_threshold, self.gate_radius, self.max_age, self.min_hits)

    def training(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            decay_epochs=tuple(self.decay_epochs), decay_factor=self.decay_factor,
            cva_weight=self.cva_weight, flip_prob=self.flip_prob, affine_prob=self.affine_prob,
            samples_per_epoch=self.samples_per_epoch, seed=self.seed,
        )

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "str":
            return raw
        if kind == "tuple[int, ...]":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if kind == "tuple[str, ...]":
            return tuple(v.strip() for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    raise ConfigError(f"{key}: unsupported type {kind}")


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in _TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw.strip())
    return RunConfig(**values)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), source=str(path))
