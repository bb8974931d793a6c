"""Optimierung und Evaluation.

L2-Ziel, Adam mit Bias-Korrektur, Epochenschleife mit Modellauswahl nach
bestem Validierungs-MSE, MSE/MAE-Metriken und Persistenz-Baseline.
"""

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from src.config.defaults import TrainConfig
from src.core.data import PreparedData, WindowDataset, iter_batches
from src.core.errors import CheckpointError, DimensionError, NumericalError
from src.core.model import TimeMachineModel
from src.core.numerics import (
    Parameter,
    Tensor,
    absolute,
    backward,
    lift,
    mul,
    reduce_mean,
    sub,
)

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

EVAL_BATCH_SIZE = 64


def _check_same_shape(pred: Tensor, target: Tensor, metric: str) -> None:
    if pred.shape != target.shape:
        raise DimensionError(
            f"{metric}: Vorhersage {list(pred.shape)} und Ziel {list(target.shape)} verschieden"
        )


def mse(pred, target) -> Tensor:
    """Mittlerer quadratischer Fehler über alle Elemente (differenzierbar)."""
    pred = lift(pred)
    target = lift(target, pred)
    _check_same_shape(pred, target, "mse")
    diff = sub(pred, target)
    return reduce_mean(mul(diff, diff))


def mae(pred, target) -> Tensor:
    """Mittlerer absoluter Fehler über alle Elemente."""
    pred = lift(pred)
    target = lift(target, pred)
    _check_same_shape(pred, target, "mae")
    return reduce_mean(absolute(sub(pred, target)))


@dataclass
class EvalMetrics:
    """Metriken auf standardisierter Skala."""
    mse: float
    mae: float
    windows: int

    def to_dict(self) -> dict:
        return asdict(self)


# --- Adam ---

@dataclass
class AdamState:
    """Momente je Parametername plus Schrittzähler."""
    lr: float
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def create(cls, params: list[Parameter], lr: float) -> "AdamState":
        state = cls(lr=lr)
        for p in params:
            state.m[p.name] = np.zeros_like(p.tensor.data)
            state.v[p.name] = np.zeros_like(p.tensor.data)
        return state


def global_grad_norm(params: list[Parameter]) -> float:
    total = 0.0
    for p in params:
        if p.tensor.grad is not None:
            total += float(np.sum(p.tensor.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def adam_step(params: list[Parameter], state: AdamState, grad_clip: Optional[float] = None) -> None:
    """Ein bias-korrigierter Adam-Schritt über alle trainierbaren Parameter.

    m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)
    """
    scale = 1.0
    if grad_clip is not None:
        norm = global_grad_norm(params)
        if norm > grad_clip:
            scale = grad_clip / norm
    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t
    for p in params:
        if not p.trainable:
            continue
        tensor = p.tensor
        grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        if scale != 1.0:
            grad = grad * scale
        m = state.m.setdefault(p.name, np.zeros_like(tensor.data))
        v = state.v.setdefault(p.name, np.zeros_like(tensor.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        update = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        tensor.data = (tensor.data - update).astype(tensor.dtype, copy=False)


# --- Trainingsschleife ---

@dataclass
class EpochLogRow:
    """Eine Zeile des Epochen-Logs."""
    epoch: int
    train_mse: float
    val_mse: float
    val_mae: float
    seconds: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    """Ergebnis eines Trainingslaufs (Modell steht danach auf dem besten Stand)."""
    rows: list[EpochLogRow]
    best_epoch: int
    best_val_mse: float
    best_val_mae: float
    best_arrays: dict[str, np.ndarray]
    optimizer: AdamState


def _parameter_norms(params: list[Parameter], limit: int = 5) -> dict[str, float]:
    norms = {p.name: float(np.linalg.norm(p.tensor.data)) for p in params}
    return dict(sorted(norms.items(), key=lambda kv: -kv[1])[:limit])


def train_loop(
    model: TimeMachineModel,
    data: PreparedData,
    config: TrainConfig,
    on_epoch: Optional[Callable[[EpochLogRow], None]] = None,
) -> TrainResult:
    """Trainiert `model` und stellt am Ende die Parameter der besten Epoche her.

    Args:
        model: Zu trainierendes Netz (M, L, T passend zu `data`).
        data: Vorbereitete Splits.
        config: Trainings-Hyperparameter.
        on_epoch: Optionaler Callback pro Epochen-Zeile (z.B. Log-Datei).

    Raises:
        NumericalError: Bei nicht-endlichem Verlust, mit Diagnose.
    """
    config.validate()
    params = model.parameters()
    state = AdamState.create(params, config.lr)
    shuffle_seq, dropout_seq = np.random.SeedSequence(config.seed).spawn(2)
    shuffle_rng = np.random.Generator(np.random.PCG64(shuffle_seq))
    dropout_rng = np.random.Generator(np.random.PCG64(dropout_seq))

    rows: list[EpochLogRow] = []
    best_epoch, best_val, best_mae = 0, float("inf"), float("inf")
    best_arrays = model.state_arrays()

    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        loss_sum, seen = 0.0, 0
        batches = iter_batches(data.train, config.batch_size, rng=shuffle_rng, prefetch=config.prefetch)
        for batch_idx, (xb, yb) in enumerate(batches):
            try:
                model.zero_grad()
                pred = model(Tensor(xb, dtype=model.config.dtype), training=True, rng=dropout_rng)
                loss = mse(pred, yb)
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericalError("Verlust ist nicht endlich")
                backward(loss)
                adam_step(params, state, config.grad_clip)
            except NumericalError as e:
                diagnostics = {
                    "epoch": epoch,
                    "batch": batch_idx,
                    "parameter_norms": _parameter_norms(params),
                }
                logger.error(f"Numerischer Abbruch in Epoche {epoch}, Batch {batch_idx}: {e}")
                raise NumericalError(
                    f"Training abgebrochen (Epoche {epoch}, Batch {batch_idx}): {e}",
                    diagnostics,
                ) from e
            loss_sum += value * len(xb)
            seen += len(xb)

        val = evaluate(model, data.val, batch_size=max(config.batch_size, EVAL_BATCH_SIZE))
        seconds = time.perf_counter() - started if config.log_wall_time else 0.0
        row = EpochLogRow(
            epoch=epoch,
            train_mse=loss_sum / max(seen, 1),
            val_mse=val.mse,
            val_mae=val.mae,
            seconds=seconds,
        )
        rows.append(row)
        if on_epoch is not None:
            on_epoch(row)
        improved = val.mse < best_val
        if improved:
            best_epoch, best_val, best_mae = epoch, val.mse, val.mae
            best_arrays = model.state_arrays()
        logger.info(
            f"Epoche {epoch}/{config.epochs}: train_mse={row.train_mse:.6f}, "
            f"val_mse={val.mse:.6f}, val_mae={val.mae:.6f}"
            + (" (neues Bestes)" if improved else "")
        )

    model.load_arrays(best_arrays)
    logger.info(f"Beste Epoche: {best_epoch} (val_mse={best_val:.6f})")
    return TrainResult(
        rows=rows,
        best_epoch=best_epoch,
        best_val_mse=best_val,
        best_val_mae=best_mae,
        best_arrays=best_arrays,
        optimizer=state,
    )


# --- Evaluation ---

def _check_channels(model: TimeMachineModel, dataset: WindowDataset) -> None:
    expected = model.config.channels
    if dataset.channels != expected:
        raise CheckpointError(
            f"Kanalanzahl passt nicht: Modell erwartet M={expected}, Datensatz hat M={dataset.channels}"
        )


def evaluate(model: TimeMachineModel, dataset: WindowDataset, batch_size: int = EVAL_BATCH_SIZE) -> EvalMetrics:
    """MSE/MAE über alle Fenster, in Reihenfolge, Dropout aus."""
    _check_channels(model, dataset)
    sq_sum, abs_sum, count = 0.0, 0.0, 0
    for xb, yb in iter_batches(dataset, batch_size):
        pred = model(Tensor(xb, dtype=model.config.dtype), training=False).data
        err = pred.astype(np.float64) - yb
        sq_sum += float(np.sum(err * err))
        abs_sum += float(np.sum(np.abs(err)))
        count += err.size
    return EvalMetrics(mse=sq_sum / count, mae=abs_sum / count, windows=len(dataset))


def persistence_baseline(dataset: WindowDataset, batch_size: int = EVAL_BATCH_SIZE) -> EvalMetrics:
    """Wiederholt den letzten beobachteten Wert für alle T Schritte."""
    sq_sum, abs_sum, count = 0.0, 0.0, 0
    for xb, yb in iter_batches(dataset, batch_size):
        pred = np.repeat(xb[:, :, -1:], dataset.horizon, axis=2)
        err = pred - yb
        sq_sum += float(np.sum(err * err))
        abs_sum += float(np.sum(np.abs(err)))
        count += err.size
    return EvalMetrics(mse=sq_sum / count, mae=abs_sum / count, windows=len(dataset))


def predict_window(
    model: TimeMachineModel, dataset: WindowDataset, index: int
) -> tuple[np.ndarray, np.ndarray]:
    """(Wahrheit [T, M], Vorhersage [T, M]) für ein einzelnes Fenster."""
    _check_channels(model, dataset)
    xb, yb = dataset.batch([index])
    pred = model(Tensor(xb, dtype=model.config.dtype), training=False).data
    return yb[0].T.copy(), pred[0].T.astype(np.float64)
