"""Configuration dataclasses, built-in profiles and config-file loading."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    """Invalid or inconsistent configuration value."""

    def __init__(self, message: str, field_name: str | None = None):
        super().__init__(message)
        self.field_name = field_name


@dataclass
class SwinConfig:
    image_size: int = 224
    patch_size: int = 4
    window_size: int = 7
    embed_dim: int = 96
    depths: tuple[int, ...] = (2, 2, 18, 2)
    num_heads: tuple[int, ...] = (3, 6, 12, 24)
    mlp_ratio: float = 4.0
    dropout_rate: float = 0.0
    drop_path_rate: float = 0.0

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.num_heads = tuple(int(h) for h in self.num_heads)
        self.validate()

    def validate(self) -> None:
        if len(self.depths) != 4 or len(self.num_heads) != 4:
            raise ConfigError("depths and num_heads must have 4 entries", "depths")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}",
                "image_size",
            )
        for s in range(4):
            ch = self.stage_channels(s + 1)
            if ch % self.num_heads[s]:
                raise ConfigError(
                    f"stage {s + 1} channels {ch} not divisible by {self.num_heads[s]} heads",
                    "num_heads",
                )
        grid = self.image_size // self.patch_size
        for s in range(4):
            g = grid >> s
            if s < 3 and (grid >> s) % 2:
                raise ConfigError(f"stage {s + 1} grid {g} is odd; cannot merge patches", "image_size")
            if g % self.stage_window(s + 1):
                raise ConfigError(
                    f"stage {s + 1} grid {g} not divisible by window {self.window_size}", "window_size"
                )
        if not 0.0 <= self.dropout_rate < 1.0 or not 0.0 <= self.drop_path_rate < 1.0:
            raise ConfigError("dropout rates must lie in [0, 1)", "dropout_rate")

    def stage_channels(self, stage: int) -> int:
        return self.embed_dim * 2 ** (stage - 1)

    def stage_grid(self, stage: int) -> int:
        return (self.image_size // self.patch_size) >> (stage - 1)

    def stage_window(self, stage: int) -> int:
        # a stage whose grid is no larger than the window attends globally
        return min(self.window_size, (self.image_size // self.patch_size) >> (stage - 1))


@dataclass
class ModelConfig:
    variant: str = "ssdca"
    fusion_stage: int = 4
    encoder: SwinConfig = field(default_factory=SwinConfig)
    dca_heads: int = 8
    dca_out_proj: bool = True
    head_hidden: int = 256
    head_dropout: float = 0.2
    single_image_source: str = "pre"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = SwinConfig(**self.encoder)
        if self.variant not in ("ssdca", "ssfc", "single"):
            raise ConfigError(f"unknown variant {self.variant!r}", "variant")
        if self.fusion_stage not in (1, 2, 3, 4):
            raise ConfigError(f"fusion_stage must be 1..4, got {self.fusion_stage}", "fusion_stage")
        if self.single_image_source not in ("pre", "post"):
            raise ConfigError("single_image_source must be 'pre' or 'post'", "single_image_source")
        if self.variant == "ssdca" and self.encoder.stage_channels(self.fusion_stage) % self.dca_heads:
            raise ConfigError(
                f"fusion channels {self.encoder.stage_channels(self.fusion_stage)} "
                f"not divisible by dca_heads {self.dca_heads}",
                "dca_heads",
            )


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    warmup_epochs: int = 10
    total_epochs: int = 30
    batch_size: int = 8
    schedule: str = "linear"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = None
    fold_count: int = 5
    selection_metric: str = "balanced_accuracy"
    topk: int = 3
    threshold: float = 0.5
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ConfigError("warmup_epochs must be < total_epochs", "warmup_epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", "batch_size")
        if self.schedule not in ("linear", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}", "schedule")
        if self.selection_metric not in ("balanced_accuracy", "accuracy"):
            raise ConfigError(f"unknown selection metric {self.selection_metric!r}", "selection_metric")
        if self.fold_count < 2:
            raise ConfigError("fold_count must be >= 2", "fold_count")


def paper_profile() -> SwinConfig:
    """Swin-Small at 224x224, patch 4, window 7."""
    return SwinConfig()


def toy_profile() -> SwinConfig:
    return SwinConfig(embed_dim=24, depths=(1, 1, 1, 1), num_heads=(1, 2, 4, 8))


PROFILES = {"paper": paper_profile, "toy": toy_profile}


@dataclass
class RunConfig:
    profile: str = "toy"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    strict: bool = True
    threads: int = 1

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _build(cls, data: dict[str, Any], section: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        name = sorted(unknown)[0]
        raise ConfigError(f"unknown field {section}.{name}", f"{section}.{name}")
    try:
        return cls(**data)
    except ConfigError as err:
        if err.field_name and not err.field_name.startswith(section):
            err.field_name = f"{section}.{err.field_name}"
        raise
    except TypeError as err:
        raise ConfigError(f"bad value in {section}: {err}", section) from err


def run_config_from_dict(data: dict[str, Any], profile: str | None = None, seed: int | None = None) -> RunConfig:
    """Resolve a (possibly partial) config mapping into a RunConfig.

    The encoder section starts from the chosen profile and is overridden
    field by field; ``seed`` propagates to the model and training sections
    unless they set their own.
    """
    data = dict(data or {})
    profile = profile or data.pop("profile", "toy")
    data.pop("profile", None)
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}", "profile")
    seed = seed if seed is not None else data.pop("seed", 0)
    data.pop("seed", None)

    model_data = dict(data.pop("model", {}) or {})
    enc = dataclasses.asdict(PROFILES[profile]())
    enc_over = model_data.pop("encoder", {}) or {}
    unknown = set(enc_over) - set(enc)
    if unknown:
        name = sorted(unknown)[0]
        raise ConfigError(f"unknown field model.encoder.{name}", f"model.encoder.{name}")
    enc.update(enc_over)
    encoder = _build(SwinConfig, enc, "model.encoder")
    model_data.setdefault("seed", seed)
    model = _build(ModelConfig, {**model_data, "encoder": encoder}, "model")

    train_data = dict(data.pop("train", {}) or {})
    train_data.setdefault("seed", seed)
    train = _build(TrainConfig, train_data, "train")

    rest = _build(RunConfig, data, "run") if data else RunConfig()
    return RunConfig(
        profile=profile, model=model, train=train, seed=seed, strict=rest.strict, threads=rest.threads
    )


def load_run_config(path: str | Path | None, profile: str | None = None, seed: int | None = None) -> RunConfig:
    data: dict[str, Any] = {}
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must contain a mapping", "config")
    return run_config_from_dict(data, profile=profile, seed=seed)
