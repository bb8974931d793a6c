"""Modell- und Trainingskonfiguration mit Standardwerten.

Standardwerte folgen den Ablationen: D-Ebenen n1=256/n2=128, State-Größe
N=256, Expansion E=1, Faltungsbreite 2, 100 Epochen, Adam mit lr=1e-3.
"""

import numbers
from dataclasses import asdict, dataclass, fields
from enum import Enum
from typing import Optional

from src.core.errors import ConfigError

# Kleinste Standardabweichung (RevIN und Scaler)
NORM_EPS = 1e-5

# Feste Grenzen des ETT-Protokolls: 12/4/4 Monate stündlicher Punkte
ETTH_BORDERS = (12 * 30 * 24, 16 * 30 * 24, 20 * 30 * 24)
ETTM_BORDERS = tuple(4 * b for b in ETTH_BORDERS)

# Anteile für Datensätze ohne Kalendergrenzen
RATIO_SPLIT = (0.7, 0.1, 0.2)


class ChannelMode(Enum):
    """Kanal-Behandlung im Modell."""
    MIXING = "mixing"
    INDEPENDENCE = "independence"
    AUTO = "auto"


class NormMode(Enum):
    """Normalisierung vor dem Netz."""
    REVIN = "revin"
    ZSCORE_INTERNAL = "zscore_internal"
    NONE = "none"


class SplitClass(Enum):
    """Split-Protokoll eines Datensatzes."""
    ETTH = "etth"
    ETTM = "ettm"
    RATIO = "ratio"


def enum_value(enum_cls, value, key: str):
    try:
        return enum_cls(value)
    except ValueError:
        allowed = ", ".join(e.value for e in enum_cls)
        raise ConfigError(f"Ungültiger Wert für '{key}': {value!r} (erlaubt: {allowed})") from None


def check_int(value, key: str, minimum: Optional[int] = None, optional: bool = False) -> None:
    """Ganzzahl (kein bool), optional mit Untergrenze.

    Raises:
        ConfigError: Bei falschem Typ oder zu kleinem Wert.
    """
    if value is None and optional:
        return
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ConfigError(f"'{key}' muss eine Ganzzahl sein, erhalten: {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"'{key}' muss >= {minimum} sein, erhalten: {value}")


def check_number(value, key: str, optional: bool = False) -> None:
    if value is None and optional:
        return
    if isinstance(value, bool) or not isinstance(value, numbers.Real):
        raise ConfigError(f"'{key}' muss eine Zahl sein, erhalten: {value!r}")


def check_bool(value, key: str) -> None:
    if not isinstance(value, bool):
        raise ConfigError(f"'{key}' muss true oder false sein, erhalten: {value!r}")


def check_str(value, key: str, optional: bool = False) -> None:
    if value is None and optional:
        return
    if not isinstance(value, str):
        raise ConfigError(f"'{key}' muss ein String sein, erhalten: {value!r}")


def strict_kwargs(cls, data: dict, section: str) -> dict:
    """Prüft ein Dict gegen die Felder einer Dataclass.

    Raises:
        ConfigError: Bei unbekannten Schlüsseln (Tippfehler-Schutz).
    """
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"Unbekannte Schlüssel in '{section}': {', '.join(unknown)}")
    return dict(data)


@dataclass
class ModelConfig:
    """Konfiguration des TimeMachine-Netzes.

    Attributes:
        lookback: Länge L des Eingabefensters.
        horizon: Vorhersagelänge T.
        channels: Kanalanzahl M (None = aus dem Datensatz übernehmen).
        n1: Embedding-Dimension der äußeren Ebene.
        n2: Embedding-Dimension der inneren Ebene (n1 > n2).
        dropout: Dropout-Rate nach E1 und E2.
        channel_mode: mixing, independence oder auto.
        norm_mode: revin, zscore_internal oder none.
        d_state: State-Größe N jeder Mamba.
        expand: Expansionsfaktor E jeder Mamba.
        conv_width: Breite w der kausalen Faltung.
        use_residual: Beide Residualpfade aktiv.
        use_skip_d: Durchreich-Term D im SSM.
        revin_affine: Lernbarer Gain/Shift in RevIN.
        dtype: float64 (Verifikation) oder float32.
        seed: Seed der Parameter-Initialisierung.
    """
    lookback: int = 96
    horizon: int = 96
    channels: Optional[int] = None
    n1: int = 256
    n2: int = 128
    dropout: float = 0.1
    channel_mode: str = ChannelMode.AUTO.value
    norm_mode: str = NormMode.REVIN.value
    d_state: int = 256
    expand: int = 1
    conv_width: int = 2
    use_residual: bool = True
    use_skip_d: bool = True
    revin_affine: bool = True
    dtype: str = "float64"
    seed: int = 2024

    def validate(self) -> "ModelConfig":
        """Prüft alle Invarianten und gibt sich selbst zurück.

        Raises:
            ConfigError: Bei verletzten Invarianten.
        """
        for key in ("lookback", "horizon", "d_state", "expand", "conv_width", "n1", "n2"):
            check_int(getattr(self, key), f"model.{key}", minimum=1)
        check_int(self.channels, "model.channels", minimum=1, optional=True)
        check_int(self.seed, "model.seed", minimum=0)
        check_number(self.dropout, "model.dropout")
        for key in ("use_residual", "use_skip_d", "revin_affine"):
            check_bool(getattr(self, key), f"model.{key}")
        for key in ("channel_mode", "norm_mode", "dtype"):
            check_str(getattr(self, key), f"model.{key}")
        if self.n1 <= self.n2:
            raise ConfigError(f"n1 muss größer als n2 sein (n1={self.n1}, n2={self.n2})")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"Dropout-Rate muss in [0, 1) liegen, erhalten: {self.dropout}")
        enum_value(ChannelMode, self.channel_mode, "model.channel_mode")
        enum_value(NormMode, self.norm_mode, "model.norm_mode")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"'dtype' muss float64 oder float32 sein, erhalten: {self.dtype!r}")
        return self

    @property
    def norm_mode_enum(self) -> NormMode:
        return NormMode(self.norm_mode)

    def to_dict(self) -> dict:
        """Serialisiert die Config für JSON und Checkpoint-Header."""
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        """Deserialisiert streng: unbekannte Schlüssel sind ein Fehler."""
        return cls(**strict_kwargs(cls, data, "model"))


@dataclass
class TrainConfig:
    """Konfiguration der Optimierung.

    Attributes:
        epochs: Anzahl Epochen (>= 1).
        batch_size: Fenster pro Minibatch.
        lr: Adam-Lernrate (> 0 fürs Lernen, 0 friert Parameter ein).
        seed: Seed für Shuffle und Dropout-Masken.
        selection_metric: Kriterium der Modellauswahl (nur val_mse).
        checkpoint_name: Dateiname des besten Checkpoints im Run-Verzeichnis.
        grad_clip: Globale Gradientennorm-Grenze (None = aus).
        prefetch: Tiefe der Batch-Warteschlange (0 = synchron).
        log_wall_time: Sekunden-Spalte im Epochen-Log befüllen.
        save_optimizer: Adam-Zustand im Checkpoint ablegen.
    """
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 2024
    selection_metric: str = "val_mse"
    checkpoint_name: str = "checkpoint.tmck"
    grad_clip: Optional[float] = None
    prefetch: int = 0
    log_wall_time: bool = True
    save_optimizer: bool = True

    def validate(self) -> "TrainConfig":
        check_int(self.epochs, "train.epochs", minimum=1)
        check_int(self.batch_size, "train.batch_size", minimum=1)
        check_int(self.seed, "train.seed", minimum=0)
        check_int(self.prefetch, "train.prefetch", minimum=0)
        check_number(self.lr, "train.lr")
        check_number(self.grad_clip, "train.grad_clip", optional=True)
        check_str(self.selection_metric, "train.selection_metric")
        check_str(self.checkpoint_name, "train.checkpoint_name")
        if not self.checkpoint_name:
            raise ConfigError("'train.checkpoint_name' darf nicht leer sein")
        for key in ("log_wall_time", "save_optimizer"):
            check_bool(getattr(self, key), f"train.{key}")
        if self.lr < 0:
            raise ConfigError(f"'lr' darf nicht negativ sein, erhalten: {self.lr}")
        if self.selection_metric != "val_mse":
            raise ConfigError(f"Nur 'val_mse' als Auswahlkriterium unterstützt: {self.selection_metric!r}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError(f"'grad_clip' muss > 0 sein, erhalten: {self.grad_clip}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**strict_kwargs(cls, data, "train"))
