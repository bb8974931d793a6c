"""Konfiguration und Standardwerte."""

from src.config.defaults import ChannelMode, ModelConfig, NormMode, SplitClass, TrainConfig
from src.config.run_config import RunConfig, load_dataset_registry, load_run_config

__all__ = [
    "ChannelMode",
    "ModelConfig",
    "NormMode",
    "SplitClass",
    "TrainConfig",
    "RunConfig",
    "load_dataset_registry",
    "load_run_config",
]
