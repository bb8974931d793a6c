"""Lauf-Konfiguration: Datensatz-Registry, Config-Datei, Overrides.

Schichtung (spätere gewinnen):
    Standardwerte < Registry-Defaults des Datensatzes < Config-Datei
    < --set abschnitt.schluessel=wert < Umgebungsvariable TM_SEED
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

from src.config.defaults import (
    ModelConfig,
    SplitClass,
    TrainConfig,
    check_bool,
    check_int,
    check_str,
    enum_value,
    strict_kwargs,
)
from src.core.errors import ConfigError

logger = logging.getLogger(__name__)

# Pfade
_CONFIG_DIR = Path(__file__).parent
_REGISTRY_FILE = _CONFIG_DIR / "datasets.json"

SEED_ENV = "TM_SEED"


# --- Datensatz-Registry (JSON) ---

@dataclass
class DatasetInfo:
    """Ein Benchmark-Datensatz aus datasets.json."""
    name: str
    channels: int
    time_points: int
    frequency: str
    split_class: str
    batch_size: int
    dropout: float


def load_dataset_registry(path: Optional[Path] = None) -> dict[str, DatasetInfo]:
    """Lädt die Datensatz-Tabelle.

    Returns:
        Dict von Name → DatasetInfo (leer, wenn die Datei fehlt).
    """
    path = path or _REGISTRY_FILE
    if not path.exists():
        logger.warning(f"Datensatz-Registry nicht gefunden: {path}")
        return {}
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
        return {d["name"]: DatasetInfo(**d) for d in data.get("datasets", [])}
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise ConfigError(f"Datensatz-Registry unlesbar ({path}): {e}") from e


# --- Abschnitte ---

@dataclass
class DatasetConfig:
    """Welche CSV, welches Split-Protokoll.

    Attributes:
        path: Pfad zur CSV-Datei.
        name: Registry-Name (z.B. "ETTh1"); None für eigene Datensätze.
        split_class: etth, ettm oder ratio.
        borders: Eigene Grenzen (train_end, val_end, test_end), überschreiben das Protokoll.
    """
    path: str = ""
    name: Optional[str] = None
    split_class: str = SplitClass.RATIO.value
    borders: Optional[list[int]] = None

    def validate(self) -> "DatasetConfig":
        check_str(self.path, "dataset.path")
        check_str(self.name, "dataset.name", optional=True)
        check_str(self.split_class, "dataset.split_class")
        enum_value(SplitClass, self.split_class, "dataset.split_class")
        if self.borders is not None:
            if not isinstance(self.borders, list) or len(self.borders) != 3:
                raise ConfigError(f"'dataset.borders' braucht genau 3 Werte, erhalten: {self.borders}")
            for border in self.borders:
                check_int(border, "dataset.borders", minimum=1)
        return self


@dataclass
class EvalOptions:
    checkpoint: Optional[str] = None
    persistence: bool = False
    batch_size: int = 64

    def validate(self) -> "EvalOptions":
        check_str(self.checkpoint, "eval.checkpoint", optional=True)
        check_bool(self.persistence, "eval.persistence")
        check_int(self.batch_size, "eval.batch_size", minimum=1)
        return self


@dataclass
class PredictOptions:
    checkpoint: Optional[str] = None
    window_index: int = 0

    def validate(self) -> "PredictOptions":
        check_str(self.checkpoint, "predict.checkpoint", optional=True)
        check_int(self.window_index, "predict.window_index", minimum=0)
        return self


@dataclass
class VerifyOptions:
    """Umfang der Verifikationssuite."""
    seeds: int = 5
    scan_instances: int = 100
    quick: bool = False

    def validate(self) -> "VerifyOptions":
        """Mindestens ein Seed und eine Scan-Instanz, sonst prüft der Lauf nichts."""
        check_int(self.seeds, "verify.seeds", minimum=1)
        check_int(self.scan_instances, "verify.scan_instances", minimum=1)
        check_bool(self.quick, "verify.quick")
        return self


_SECTIONS = {
    "dataset": DatasetConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "eval": EvalOptions,
    "predict": PredictOptions,
    "verify": VerifyOptions,
}


@dataclass
class RunConfig:
    """Vollständige, zusammengeführte Konfiguration eines Kommandos."""
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs/default"
    eval: EvalOptions = field(default_factory=EvalOptions)
    predict: PredictOptions = field(default_factory=PredictOptions)
    verify: VerifyOptions = field(default_factory=VerifyOptions)
    source_text: Optional[str] = field(default=None, repr=False)

    def validate(self) -> "RunConfig":
        self.dataset.validate()
        self.model.validate()
        self.train.validate()
        self.eval.validate()
        self.predict.validate()
        self.verify.validate()
        return self

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.output_dir) / self.train.checkpoint_name

    def to_dict(self) -> dict:
        """Effektive Konfiguration (ohne archivierten Quelltext)."""
        data = asdict(self)
        data.pop("source_text", None)
        return data

    @classmethod
    def from_dict(cls, data: dict, source_text: Optional[str] = None) -> "RunConfig":
        """Deserialisiert streng: unbekannte Abschnitte/Schlüssel sind ein Fehler."""
        known = set(_SECTIONS) | {"output_dir"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"Unbekannte Abschnitte in der Config: {', '.join(unknown)}")
        kwargs = {}
        for section, section_cls in _SECTIONS.items():
            value = data.get(section, {}) or {}
            if not isinstance(value, dict):
                raise ConfigError(f"Abschnitt '{section}' muss ein Objekt sein")
            kwargs[section] = section_cls(**strict_kwargs(section_cls, value, section))
        if "output_dir" in data:
            kwargs["output_dir"] = str(data["output_dir"])
        return cls(source_text=source_text, **kwargs)


# --- Overrides ---

def _parse_value(raw: str):
    """JSON-Literal wenn möglich (Zahlen, true/false, null, Listen), sonst String."""
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_override(data: dict, assignment: str) -> None:
    """Wendet ein `abschnitt.schluessel=wert` auf das Roh-Dict an.

    Raises:
        ConfigError: Bei fehlendem '=' oder unbekanntem Abschnitt.
    """
    key, sep, raw = assignment.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f"Override braucht die Form abschnitt.schluessel=wert: {assignment!r}")
    value = _parse_value(raw.strip())
    if key == "output_dir":
        data["output_dir"] = value
        return
    section, dot, name = key.partition(".")
    if not dot or section not in _SECTIONS or not name:
        raise ConfigError(f"Unbekannter Override-Schlüssel: {key!r}")
    target = data.setdefault(section, {})
    target[name] = value


def _apply_registry(data: dict, registry: Mapping[str, DatasetInfo]) -> None:
    """Füllt nur Schlüssel, die weder Datei noch --set gesetzt haben."""
    name = (data.get("dataset") or {}).get("name")
    if name is None:
        return
    info = registry.get(name)
    if info is None:
        raise ConfigError(
            f"Unbekannter Datensatz '{name}' (bekannt: {', '.join(sorted(registry))})"
        )
    data["dataset"].setdefault("split_class", info.split_class)
    data.setdefault("train", {}).setdefault("batch_size", info.batch_size)
    data.setdefault("model", {}).setdefault("dropout", info.dropout)
    logger.info(
        f"Registry '{name}': split={data['dataset']['split_class']}, "
        f"batch_size={data['train']['batch_size']}, dropout={data['model']['dropout']}"
    )


def merge_config(
    data: dict,
    overrides: Sequence[str] = (),
    env: Optional[Mapping[str, str]] = None,
    registry: Optional[Mapping[str, DatasetInfo]] = None,
    source_text: Optional[str] = None,
) -> RunConfig:
    """Führt Roh-Dict, Overrides, Registry und Umgebung zur RunConfig zusammen."""
    data = json.loads(json.dumps(data))
    for assignment in overrides:
        apply_override(data, assignment)
    _apply_registry(data, registry if registry is not None else load_dataset_registry())

    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} muss eine Ganzzahl sein: {env[SEED_ENV]!r}") from None
        data.setdefault("model", {})["seed"] = seed
        data.setdefault("train", {})["seed"] = seed
        logger.info(f"Seed aus {SEED_ENV}: {seed}")

    return RunConfig.from_dict(data, source_text=source_text).validate()


def load_run_config(
    path=None,
    overrides: Sequence[str] = (),
    env: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """Lädt eine JSON-Config-Datei (optional) und wendet alle Schichten an.

    Raises:
        ConfigError: Bei fehlender/ungültiger Datei oder ungültigen Werten.
    """
    data: dict = {}
    source_text = None
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config-Datei nicht gefunden: {path}")
        source_text = path.read_text(encoding="utf-8")
        try:
            data = json.loads(source_text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config-Datei ist kein gültiges JSON ({path}): {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"Config-Datei muss ein JSON-Objekt enthalten: {path}")
        logger.info(f"Config geladen: {path}")
    return merge_config(data, overrides, env=env, source_text=source_text)
