"""Model, training and run configuration with paper/toy presets.

Configs serialize to flat JSON with dotted keys (``model.dim``,
``train.peak_lr``, ...) so any single value can be overridden from the
command line with ``--set key=value``.
"""

from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

CONDITIONING_MODES = ("pluecker", "se3-token", "latent-camera")
CANONICAL_MODES = ("middle-frame", "first-frame")
PRESETS = ("paper", "toy")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    height: int = 32
    width: int = 32
    patch_size: int = 8
    dim: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    camera_layers: int = 2
    scene_layers: int = 2
    render_layers: int = 2
    scene_tokens: int = 16
    conditioning: str = "pluecker"
    canonical: str = "middle-frame"

    def __post_init__(self):
        self.validate()

    def validate(self):
        s = self.patch_size
        if s <= 0 or self.height % s or self.width % s:
            raise ConfigError(f"patch size {s} must divide image size {self.height}x{self.width}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by {self.heads} heads")
        if self.dim % 4:
            raise ConfigError(f"dim {self.dim} must be a multiple of 4 for the 2D positional embedding")
        if min(self.camera_layers, self.scene_layers, self.render_layers) < 1:
            raise ConfigError("every transformer block needs at least one layer")
        if self.scene_tokens < 1:
            raise ConfigError("scene_tokens must be >= 1")
        if self.conditioning not in CONDITIONING_MODES:
            raise ConfigError(f"conditioning must be one of {CONDITIONING_MODES}, got {self.conditioning!r}")
        if self.canonical not in CANONICAL_MODES:
            raise ConfigError(f"canonical must be one of {CANONICAL_MODES}, got {self.canonical!r}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch_size, self.width // self.patch_size

    @property
    def tokens_per_view(self) -> int:
        h, w = self.grid
        return h * w


@dataclass
class TrainConfig:
    num_input: int = 12
    num_target: int = 8
    range_start: tuple = (24, 32)
    range_end: tuple = (48, 65)
    curriculum: bool = True
    unordered: bool = False
    total_iters: int = 2000
    warmup_iters: int = 100
    peak_lr: float = 3e-4
    final_lr: float = 1.125e-4
    batch_size: int = 4
    perceptual_weight: float = 0.2
    grad_clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    checkpoint_every: int = 500
    log_every: int = 1

    def __post_init__(self):
        self.range_start = tuple(int(v) for v in self.range_start)
        self.range_end = tuple(int(v) for v in self.range_end)
        self.validate()

    def validate(self):
        if self.num_input < 1 or self.num_target < 1:
            raise ConfigError("num_input and num_target must be >= 1")
        if not 0 <= self.warmup_iters < self.total_iters:
            raise ConfigError(f"warmup_iters ({self.warmup_iters}) must be below total_iters ({self.total_iters})")
        for name in ("range_start", "range_end"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name}: lo {lo} > hi {hi}")
        if self.perceptual_weight < 0:
            raise ConfigError("perceptual_weight must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    @property
    def num_views(self) -> int:
        return self.num_input + self.num_target


@dataclass
class DataConfig:
    root: str = "data"
    scenes: int = 16
    test_scenes: int = 4
    frames: int = 70
    focal_ratio: float = 0.75


@dataclass
class EvalConfig:
    probe_steps: int = 500
    probe_lr: float = 1e-3
    probe_windows: int = 8


@dataclass
class RunConfig:
    preset: str = "toy"
    seed: int = 0
    out: str = "runs/default"
    workers: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    # -- flat dotted-key serialization ---------------------------------

    def to_flat(self) -> dict[str, Any]:
        flat = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for sub in fields(value):
                    v = getattr(value, sub.name)
                    flat[f"{f.name}.{sub.name}"] = list(v) if isinstance(v, tuple) else v
            else:
                flat[f.name] = value
        return flat

    @classmethod
    def from_flat(cls, flat: dict[str, Any]) -> "RunConfig":
        base = preset_config(flat.get("preset", "toy"))
        return base.updated(flat)

    def updated(self, flat: dict[str, Any]) -> "RunConfig":
        current = self.to_flat()
        for key in flat:
            if key not in current:
                raise ConfigError(f"unknown config key {key!r}")
        current.update(flat)
        top, groups = {}, {}
        for key, value in current.items():
            if "." in key:
                group, name = key.split(".", 1)
                groups.setdefault(group, {})[name] = value
            else:
                top[key] = value
        if top["preset"] not in PRESETS:
            raise ConfigError(f"preset must be one of {PRESETS}, got {top['preset']!r}")
        try:
            return RunConfig(
                **top,
                model=ModelConfig(**groups["model"]),
                train=TrainConfig(**groups["train"]),
                data=DataConfig(**groups["data"]),
                eval=EvalConfig(**groups["eval"]),
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def with_overrides(self, pairs: list[str]) -> "RunConfig":
        """Apply ``key=value`` strings; values are parsed as JSON when possible."""
        current = self.to_flat()
        updates = {}
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"override {pair!r} is not of the form key=value")
            key, raw = pair.split("=", 1)
            key = key.strip()
            if key not in current:
                raise ConfigError(f"unknown config key {key!r}")
            updates[key] = _coerce(raw, current[key], key)
        return self.updated(updates)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_flat(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            flat = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(flat, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        return cls.from_flat(flat)


def _coerce(raw: str, like: Any, key: str):
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    if isinstance(like, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true/false, got {raw!r}")
    elif isinstance(like, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} expects an integer, got {raw!r}")
    elif isinstance(like, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {raw!r}")
        value = float(value)
    elif isinstance(like, (list, tuple)):
        if not isinstance(value, list):
            raise ConfigError(f"{key} expects a JSON list, got {raw!r}")
    elif isinstance(like, str):
        value = raw
    return value


def preset_config(name: str) -> RunConfig:
    if name == "toy":
        return RunConfig(preset="toy")
    if name == "paper":
        return RunConfig(
            preset="paper",
            model=ModelConfig(
                height=256, width=256, patch_size=16, dim=768, heads=12,
                camera_layers=8, scene_layers=8, render_layers=8, scene_tokens=3072,
            ),
            train=TrainConfig(
                num_input=12, num_target=8, range_start=(24, 32), range_end=(48, 65),
                total_iters=50_000, warmup_iters=3000, peak_lr=4e-4, final_lr=1.5e-4,
                batch_size=256, perceptual_weight=0.2, grad_clip=1.0, checkpoint_every=5000,
            ),
            data=DataConfig(frames=70),
        )
    raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent, named random stream derived from the root seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def substream_seed(seed: int, name: str) -> int:
    return int(substream(seed, name).integers(0, 2**63 - 1))
