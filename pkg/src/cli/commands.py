"""Kommandozeile: train, eval, verify, predict.

Aufruf:
    python main.py train   --config run.json [--set train.epochs=10 ...]
    python main.py eval    --config run.json [--persistence]
    python main.py verify  [--config run.json] [--set verify.quick=true]
    python main.py predict --config run.json --set predict.window_index=3

Exit-Codes: 0 Erfolg, 1 Config/Checkpoint, 2 Daten, 3 Numerik,
4 fehlgeschlagene Verifikation.
"""

import argparse
import json
import logging
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from src.config.run_config import RunConfig, load_run_config
from src.core.checkpoint import load_checkpoint, save_checkpoint
from src.core.data import PreparedData, prepare_data
from src.core.errors import (
    CheckpointError,
    ConfigError,
    DataError,
    NumericalError,
    TimeMachineError,
)
from src.core.model import TimeMachineModel, count_params
from src.core.report import render_metrics_report, render_verify_report
from src.core.run_logger import RunLogger
from src.core.train import evaluate, persistence_baseline, predict_window, train_loop
from src.core.verify import run_verification

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3
EXIT_VERIFY_FAILED = 4


def _print_json(data: dict) -> None:
    print(json.dumps(data, ensure_ascii=False, indent=2, sort_keys=True))


def _load_data(config: RunConfig, lookback: int, horizon: int) -> PreparedData:
    if not config.dataset.path:
        raise ConfigError("dataset.path ist nicht gesetzt")
    return prepare_data(
        config.dataset.path,
        config.dataset.split_class,
        lookback,
        horizon,
        borders=config.dataset.borders,
    )


def _dataset_label(config: RunConfig, data: PreparedData) -> str:
    return config.dataset.name or data.series.name


def _checkpoint_for(config: RunConfig, explicit: Optional[str]) -> Path:
    return Path(explicit) if explicit else config.checkpoint_path


# --- Kommandos ---

def cmd_train(config: RunConfig) -> int:
    """Trainiert, schreibt Checkpoint, Epochen-Log und Metriken."""
    run_log = RunLogger(config.output_dir)
    data = _load_data(config, config.model.lookback, config.model.horizon)
    if config.model.channels is None:
        config.model.channels = data.channels
    elif config.model.channels != data.channels:
        raise ConfigError(
            f"model.channels={config.model.channels}, Datensatz hat M={data.channels}"
        )
    run_log.write_config(config.to_dict(), config.source_text)

    model = TimeMachineModel(config.model)
    label = _dataset_label(config, data)
    logger.info(
        f"Training '{label}': M={data.channels}, Modus={model.mode.value}, "
        f"{count_params(config.model)} Parameter, batch_size={config.train.batch_size}"
    )

    rows: list[dict] = []

    def on_epoch(row) -> None:
        rows.append(row.to_dict())
        run_log.write_epoch_log(rows)

    result = train_loop(model, data, config.train, on_epoch=on_epoch)

    run_info = {
        "dataset": label,
        "seed": config.train.seed,
        "epoch": result.best_epoch,
        "val_mse": result.best_val_mse,
        "val_mae": result.best_val_mae,
    }
    checkpoint = save_checkpoint(
        config.checkpoint_path,
        model,
        run_info=run_info,
        optimizer=result.optimizer if config.train.save_optimizer else None,
    )

    test = evaluate(model, data.test, batch_size=config.eval.batch_size)
    metrics = {
        "val": {"mse": result.best_val_mse, "mae": result.best_val_mae, "windows": len(data.val)},
        "test": test.to_dict(),
    }
    document = {
        "dataset": label,
        "best_epoch": result.best_epoch,
        "parameters": count_params(config.model),
        "channel_mode": model.mode.value,
        "checkpoint": str(checkpoint),
        "metrics": metrics,
    }
    run_log.write_json("metrics.json", document)
    run_log.write_text(
        "metrics_report.txt",
        render_metrics_report(label, config.model.to_dict(), metrics, best_epoch=result.best_epoch),
    )
    _print_json(document)
    return EXIT_OK


def cmd_eval(config: RunConfig) -> int:
    """Bewertet einen Checkpoint auf Val und Test (optional mit Persistenz-Baseline)."""
    checkpoint = load_checkpoint(_checkpoint_for(config, config.eval.checkpoint))
    data = _load_data(config, checkpoint.config.lookback, checkpoint.config.horizon)
    model = checkpoint.build_model(expected_channels=data.channels)
    label = _dataset_label(config, data)

    metrics = {
        split_name: evaluate(model, getattr(data, split_name), config.eval.batch_size).to_dict()
        for split_name in ("val", "test")
    }
    document = {"dataset": label, "checkpoint_run": checkpoint.run_info, "metrics": metrics}
    baseline = None
    if config.eval.persistence:
        baseline = {
            split_name: persistence_baseline(getattr(data, split_name)).to_dict()
            for split_name in ("val", "test")
        }
        document["persistence"] = baseline

    run_log = RunLogger(config.output_dir)
    run_log.write_json("eval_metrics.json", document)
    run_log.write_text(
        "eval_report.txt",
        render_metrics_report(label, checkpoint.config.to_dict(), metrics, baseline=baseline),
    )
    _print_json(document)
    return EXIT_OK


def cmd_verify(config: RunConfig) -> int:
    """Läuft die Verifikationssuite; Exit 0 nur, wenn alle Prüfungen bestehen."""
    results = run_verification(config.verify)
    report = render_verify_report(results)
    print(report, end="")
    run_log = RunLogger(config.output_dir)
    run_log.write_text("verify_report.txt", report)
    run_log.write_json("verify.json", {"checks": [r.to_dict() for r in results]})
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY_FAILED


def cmd_predict(config: RunConfig) -> int:
    """Schreibt (channel, t, truth, prediction) für ein Testfenster."""
    checkpoint = load_checkpoint(_checkpoint_for(config, config.predict.checkpoint))
    data = _load_data(config, checkpoint.config.lookback, checkpoint.config.horizon)
    model = checkpoint.build_model(expected_channels=data.channels)
    index = config.predict.window_index
    if not 0 <= index < len(data.test):
        raise ConfigError(
            f"predict.window_index={index} außerhalb der Testfenster [0, {len(data.test)})"
        )
    truth, pred = predict_window(model, data.test, index)

    horizon, channels = truth.shape
    names = data.series.columns or [str(j) for j in range(channels)]
    frame = pd.DataFrame({
        "channel": np.repeat(names, horizon),
        "t": np.tile(np.arange(horizon), channels),
        "truth": truth.T.reshape(-1),
        "prediction": pred.T.reshape(-1),
    })
    target = RunLogger(config.output_dir).write_csv(f"predictions_{index}.csv", frame)
    _print_json({"window_index": index, "rows": len(frame), "file": str(target)})
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "verify": cmd_verify,
    "predict": cmd_predict,
}


# --- Parser ---

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tm",
        description="TimeMachine: Langzeit-Vorhersage multivariater Zeitreihen mit vier Mambas",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, handler in COMMANDS.items():
        cmd = sub.add_parser(name, help=handler.__doc__.splitlines()[0])
        cmd.add_argument("--config", help="JSON-Konfigurationsdatei")
        cmd.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="ABSCHNITT.SCHLUESSEL=WERT",
            help="Überschreibt einen Config-Wert (mehrfach möglich)",
        )
        cmd.add_argument("--verbose", action="store_true", help="DEBUG-Logging")
        if name == "eval":
            cmd.add_argument(
                "--persistence", action="store_true", help="Persistenz-Baseline mit ausgeben"
            )
    return parser


def run(args: argparse.Namespace) -> int:
    """Führt ein geparstes Kommando aus und bildet Fehler auf Exit-Codes ab."""
    overrides = list(args.overrides)
    if getattr(args, "persistence", False):
        overrides.append("eval.persistence=true")
    try:
        config = load_run_config(args.config, overrides)
        return COMMANDS[args.command](config)
    except (ConfigError, CheckpointError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_CONFIG
    except DataError as e:
        logger.error(f"Datenfehler: {e}")
        return EXIT_DATA
    except NumericalError as e:
        logger.error(f"Numerischer Abbruch: {e}")
        if e.diagnostics:
            logger.error(f"Diagnose: {json.dumps(e.diagnostics, ensure_ascii=False)}")
        return EXIT_NUMERICAL
    except TimeMachineError as e:
        logger.exception(f"Unerwarteter Fehler: {e}")
        return EXIT_CONFIG


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parst `argv` und führt das Kommando aus (ohne Logging-Setup)."""
    return run(build_parser().parse_args(argv))

