"""Numerik, Modell, Daten und Training des TimeMachine-Forecasters."""

from src.core.errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    NumericalError,
    TimeMachineError,
)

__all__ = [
    "TimeMachineError",
    "ConfigError",
    "DimensionError",
    "ContractError",
    "DataError",
    "CheckpointError",
    "NumericalError",
]
