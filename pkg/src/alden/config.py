"""Configuration dataclasses, strict dict loading, and dotted-path overrides.

Every config is a frozen-ish plain dataclass validated in ``__post_init__``.
``from_dict`` rejects unknown keys by name so a typo in a run file never
silently falls back to a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

HU_MIN = -1024.0
HU_MAX = 3071.0
DISPLAY_WINDOW = (-160.0, 240.0)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def _require(cond: bool, field_name: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{field_name}: {msg}")


@dataclass
class DoseSimConfig:
    dose_fraction: float = 0.25
    photon_count_full_dose: float = 1.0e4
    electronic_noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        _require(0.0 < self.dose_fraction <= 1.0, "dose.dose_fraction", "must lie in (0, 1]")
        _require(self.photon_count_full_dose > 0, "dose.photon_count_full_dose", "must be > 0")
        _require(self.electronic_noise_sigma >= 0, "dose.electronic_noise_sigma", "must be >= 0")


@dataclass
class BackboneSpec:
    kind: str = "tiny-test"
    patch_size: int = 8
    embed_dim: int = 32
    num_blocks: int = 12
    num_heads: int = 2
    tap_blocks: tuple[int, int, int] = (4, 8, 12)
    input_size: int = 64
    checkpoint_path: str | None = None
    init_seed: int = 1234
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        self.tap_blocks = tuple(int(b) for b in self.tap_blocks)
        self.mean = tuple(float(v) for v in self.mean)
        self.std = tuple(float(v) for v in self.std)
        _require(self.kind in ("tiny-test", "external-checkpoint"), "backbone.kind",
                 f"unknown kind {self.kind!r}")
        _require(len(self.tap_blocks) == 3, "backbone.tap_blocks", "needs exactly three entries")
        _require(all(a < b for a, b in zip(self.tap_blocks, self.tap_blocks[1:])),
                 "backbone.tap_blocks", "must be strictly increasing")
        _require(all(1 <= b <= self.num_blocks for b in self.tap_blocks),
                 "backbone.tap_blocks", f"entries must lie in [1, {self.num_blocks}]")
        _require(self.patch_size >= 1, "backbone.patch_size", "must be >= 1")
        _require(self.input_size % self.patch_size == 0, "backbone.input_size",
                 "must be divisible by patch_size")
        _require(self.embed_dim % self.num_heads == 0, "backbone.embed_dim",
                 "must be divisible by num_heads")
        _require(len(self.mean) == 3 and len(self.std) == 3, "backbone.mean/std", "need 3 channels")
        _require(all(s > 0 for s in self.std), "backbone.std", "must be positive")
        if self.kind == "external-checkpoint":
            _require(self.checkpoint_path is not None, "backbone.checkpoint_path",
                     "required for external-checkpoint backbones")

    @property
    def grid_size(self) -> int:
        return self.input_size // self.patch_size


@dataclass
class GeneratorConfig:
    base_channels: int = 16
    depth: int = 3
    use_self_attention: bool = True
    residual_output: bool = True
    attention_heads: int = 2

    def __post_init__(self):
        _require(self.base_channels >= 8, "generator.base_channels", "must be >= 8")
        _require(self.depth >= 2, "generator.depth", "must be >= 2")
        bottleneck = self.base_channels * 2 ** self.depth
        _require(bottleneck % self.attention_heads == 0, "generator.attention_heads",
                 "must divide the bottleneck width")


@dataclass
class DiscriminatorConfig:
    num_layers: int = 5
    base_channels: int = 16
    aff_layers: tuple[int, ...] = (2, 3, 4)
    aff_embed_dim: int = 32
    num_heads: int = 2
    strides: tuple[int, ...] = (2, 2, 2, 1, 1)
    kernel_size: int = 4
    group_norm_groups: int = 8

    def __post_init__(self):
        self.aff_layers = tuple(sorted(int(i) for i in self.aff_layers))
        self.strides = tuple(int(s) for s in self.strides)
        _require(self.num_layers >= 2, "discriminator.num_layers", "must be >= 2")
        _require(len(self.strides) == self.num_layers, "discriminator.strides",
                 "needs one stride per layer")
        _require(len(set(self.aff_layers)) == len(self.aff_layers), "discriminator.aff_layers",
                 "duplicate layer index")
        # the last layer is the 1-channel logit conv; nothing may be fused after it
        _require(all(1 <= i < self.num_layers for i in self.aff_layers), "discriminator.aff_layers",
                 f"indices must lie in [1, {self.num_layers - 1}]")
        _require(len(self.aff_layers) in (0, 3), "discriminator.aff_layers",
                 "must name zero or three layers (one per pyramid level)")
        _require(self.aff_embed_dim % self.num_heads == 0, "discriminator.aff_embed_dim",
                 "must be divisible by num_heads")
        _require(self.aff_embed_dim % self.group_norm_groups == 0, "discriminator.aff_embed_dim",
                 "must be divisible by group_norm_groups")

    def trunk_channels(self) -> list[int]:
        chans = [self.base_channels * min(2 ** i, 8) for i in range(self.num_layers - 1)]
        return chans + [1]


@dataclass
class ObjectiveConfig:
    lambda1: float = 0.01
    lambda2: float = 0.5
    tau: float = 0.1
    K: int = 256
    M: int = 32
    enable_aad: bool = True
    enable_scl: bool = True

    def __post_init__(self):
        _require(self.tau > 0, "objective.tau", "must be > 0")
        _require(self.K >= 1, "objective.K", "must be >= 1")
        _require(self.M >= 0, "objective.M", "must be >= 0")
        _require(self.lambda1 >= 0, "objective.lambda1", "must be >= 0")
        _require(self.lambda2 >= 0, "objective.lambda2", "must be >= 0")


ABLATION_PRESETS: dict[str, dict[str, bool]] = {
    "baseline": {"enable_aad": False, "enable_scl": False},
    "aad-only": {"enable_aad": True, "enable_scl": False},
    "scl-only": {"enable_aad": False, "enable_scl": True},
    "full": {"enable_aad": True, "enable_scl": True},
}
ABLATION_ROW_NAMES = {"baseline": "Baseline", "aad-only": "AAD", "scl-only": "SCL", "full": "ALDEN"}


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    total_iterations: int = 300_000
    adam_betas: tuple[float, float] = (0.5, 0.999)
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 10_000
    window_min: float = DISPLAY_WINDOW[0]
    window_max: float = DISPLAY_WINDOW[1]
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)

    def __post_init__(self):
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        _require(self.learning_rate > 0 and math.isfinite(self.learning_rate),
                 "learning_rate", "must be a finite value > 0")
        _require(self.batch_size >= 1, "batch_size", "must be >= 1")
        _require(self.total_iterations >= 1, "total_iterations", "must be >= 1")
        _require(len(self.adam_betas) == 2 and all(0 <= b < 1 for b in self.adam_betas),
                 "adam_betas", "need two values in [0, 1)")
        _require(self.log_every >= 1, "log_every", "must be >= 1")
        _require(self.checkpoint_every >= 1, "checkpoint_every", "must be >= 1")
        _require(self.window_min < self.window_max, "window_min", "must be below window_max")

    def check_compatibility(self) -> None:
        """Cross-section checks that only matter once a run is about to start."""
        if not self.objective.enable_scl:
            return
        grid = self.backbone.grid_size ** 2
        _require(self.objective.K <= grid, "objective.K",
                 f"{self.objective.K} anchors exceed the {grid}-token backbone grid")
        _require(self.objective.M <= grid - 1, "objective.M",
                 f"{self.objective.M} negatives exceed the {grid - 1} non-anchor tokens")

    @classmethod
    def toy(cls, **overrides) -> "TrainConfig":
        """Desk-scale defaults: tiny backbone, batch 2, 2000 iterations."""
        base = dict(
            learning_rate=1e-4,
            batch_size=2,
            total_iterations=2000,
            log_every=1,
            checkpoint_every=500,
            objective=ObjectiveConfig(K=32, M=32),
        )
        base.update(overrides)
        return cls(**base)

    def engine_dict(self) -> dict:
        """Only the fields that shape each step; run length and logging cadence are left out so
        extending a run does not look like a config change."""
        skip = {"total_iterations", "log_every", "checkpoint_every"}
        return {f.name: to_dict(getattr(self, f.name)) for f in dataclasses.fields(TrainConfig)
                if f.name not in skip}

    def config_hash(self) -> str:
        blob = json.dumps(self.engine_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class DataConfig:
    train_manifest: str | None = None
    test_manifest: str | None = None
    phantom_count: int = 32
    phantom_size: int = 64
    phantom_structures: int = 6


@dataclass
class RunConfig(TrainConfig):
    """What a run file holds: the training config plus dose and data sections."""

    output_dir: str = "runs/default"
    dose: DoseSimConfig = field(default_factory=DoseSimConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{f.name: getattr(self, f.name) for f in dataclasses.fields(TrainConfig)})


def to_dict(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [to_dict(v) for v in obj]
    return obj


def from_dict(cls: type, data: dict, prefix: str = "") -> Any:
    """Build dataclass ``cls`` from ``data``; unknown keys raise ConfigError."""
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or '<root>'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        path = f"{prefix}{key}"
        if key not in names:
            raise ConfigError(f"unknown config key '{path}'")
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            value = from_dict(hint, value, prefix=path + ".")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{prefix or '<root>'}: {exc}") from exc


def _parse_value(raw: str) -> Any:
    low = raw.strip().lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``key.sub=value`` strings onto a nested dict (copied)."""
    out = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override '{key}': '{p}' is not a section")
        node[parts[-1]] = _parse_value(raw)
    return out


def load_run_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if overrides:
        data = apply_overrides(data, overrides)
    return from_dict(RunConfig, data)


def dump_config(cfg: Any, path: str | Path) -> None:
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n", encoding="utf-8")
