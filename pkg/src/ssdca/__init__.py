"""Siamese Swin encoder with dual cross-attention for paired-visit regrowth classification."""

from .config import ConfigError, ModelConfig, RunConfig, SwinConfig, TrainConfig, load_run_config
from .fusion import SSDCA, SSFC, DualCrossAttention, PairLogit, SingleImage, build_model
from .swin import FeatureMap, SwinEncoder

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DualCrossAttention",
    "FeatureMap",
    "ModelConfig",
    "PairLogit",
    "RunConfig",
    "SSDCA",
    "SSFC",
    "SingleImage",
    "SwinConfig",
    "SwinEncoder",
    "TrainConfig",
    "build_model",
    "load_run_config",
]
