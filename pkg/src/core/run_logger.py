"""Artefakte eines Laufs im Ausgabeverzeichnis.

Festes Layout:
    config.source.json     Konfigurationsdatei unverändert archiviert
    config.effective.json  zusammengeführte Konfiguration (Datei + --set + Umgebung)
    epoch_log.csv          epoch,train_mse,val_mse,val_mae,seconds
    checkpoint.tmck        bester Checkpoint
    metrics.json           Abschluss-Metriken von `train`
    metrics_report.txt     gerenderter Bericht
    eval_metrics.json      Metriken von `eval` (optional mit Persistenz-Baseline)
    eval_report.txt        gerenderter Bericht von `eval`
    verify_report.txt      Prüftabelle von `verify`
    verify.json            dieselben Prüfungen maschinenlesbar
    predictions_<k>.csv    Vorhersage für Testfenster k
"""

import json
import logging
from pathlib import Path
from typing import Iterable, Optional

import pandas as pd

logger = logging.getLogger(__name__)

EPOCH_LOG_COLUMNS = ["epoch", "train_mse", "val_mse", "val_mae", "seconds"]


class RunLogger:
    """Schreibt alle Dateien eines Laufs in `output_dir`."""

    def __init__(self, output_dir) -> None:
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.output_dir / name

    def write_config(self, effective: dict, source_text: Optional[str] = None) -> None:
        """Archiviert die Quelldatei wörtlich und die effektive Konfiguration."""
        if source_text is not None:
            self.path("config.source.json").write_text(source_text, encoding="utf-8")
        self.write_json("config.effective.json", effective)

    def write_json(self, name: str, data: dict) -> Path:
        target = self.path(name)
        target.write_text(
            json.dumps(data, ensure_ascii=False, indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        logger.info(f"Geschrieben: {target}")
        return target

    def write_text(self, name: str, text: str) -> Path:
        target = self.path(name)
        target.write_text(text, encoding="utf-8")
        logger.info(f"Geschrieben: {target}")
        return target

    def write_epoch_log(self, rows: Iterable[dict]) -> Path:
        """Schreibt das komplette Epochen-Log (bei jedem Aufruf neu)."""
        frame = pd.DataFrame(list(rows), columns=EPOCH_LOG_COLUMNS)
        target = self.path("epoch_log.csv")
        frame.to_csv(target, index=False, lineterminator="\n")
        return target

    def write_csv(self, name: str, frame: pd.DataFrame) -> Path:
        target = self.path(name)
        frame.to_csv(target, index=False, lineterminator="\n")
        logger.info(f"Geschrieben: {target} ({len(frame)} Zeilen)")
        return target
