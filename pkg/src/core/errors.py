"""Fehlerhierarchie des TimeMachine-Forecasters.

Jede Fehlerklasse entspricht genau einem CLI-Exit-Code (siehe
src/cli/commands.py). Module werfen nur diese Klassen; das Abfangen und
Loggen passiert an der CLI-Grenze.
"""

from typing import Optional


class TimeMachineError(Exception):
    """Basisklasse aller fachlichen Fehler."""


class ConfigError(TimeMachineError):
    """Ungültige oder unbekannte Konfiguration."""


class DimensionError(TimeMachineError):
    """Shape-Konflikt zwischen Operanden oder Modellstufen."""


class ContractError(TimeMachineError):
    """Verletzte Vorbedingung (z.B. nicht-skalare Wurzel in backward)."""


class DataError(TimeMachineError):
    """Datensatz nicht lesbar, unvollständig oder zu kurz."""


class CheckpointError(TimeMachineError):
    """Checkpoint-Datei beschädigt oder passt nicht zum Datensatz."""


class NumericalError(TimeMachineError):
    """NaN/Inf in einer Tensor-Operation oder im Trainingsverlust.

    Attributes:
        diagnostics: Optionale Zusatzinfos (Epoche, Batch, Parameternormen).
    """

    def __init__(self, message: str, diagnostics: Optional[dict] = None) -> None:
        super().__init__(message)
        self.diagnostics = diagnostics or {}
