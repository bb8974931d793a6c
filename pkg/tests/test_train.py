"""Tests für Metriken, Adam, Trainingsschleife und Evaluation."""
import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src.config.defaults import ModelConfig, TrainConfig
from src.core.data import make_windows, prepare_data
from src.core.errors import CheckpointError, DimensionError, NumericalError
from src.core.model import TimeMachineModel
from src.core.numerics import Parameter, Tensor
from src.core.train import (
    AdamState,
    adam_step,
    evaluate,
    mae,
    mse,
    persistence_baseline,
    predict_window,
    train_loop,
)


def sinusoid_csv(path: Path, length: int = 120, channels: int = 2) -> Path:
    t = np.arange(length)
    columns = {f"s{j}": np.sin(2 * np.pi * t / (12 + 5 * j) + j) for j in range(channels)}
    frame = pd.DataFrame(columns)
    frame.insert(0, "date", pd.date_range("2021-01-01", periods=length, freq="60min").strftime("%Y-%m-%d %H:%M:%S"))
    frame.to_csv(path, index=False)
    return path


def toy_model_config(channels=2, **changes) -> ModelConfig:
    base = dict(lookback=8, horizon=4, channels=channels, n1=8, n2=4, d_state=2, dropout=0.1, seed=3)
    base.update(changes)
    return ModelConfig(**base)


@pytest.fixture
def toy_data(tmp_path):
    return prepare_data(sinusoid_csv(tmp_path / "sine.csv"), "ratio", lookback=8, horizon=4)


# --- Metriken ---

@pytest.mark.parametrize(
    "pred,target,expected",
    [([0.0, 0.0], [1.0, 1.0], 1.0), ([1.0, -1.0], [0.0, 0.0], 1.0), ([0.3, 0.7], [0.3, 0.7], 0.0)],
)
def test_mse_mae_examples(pred, target, expected):
    assert mse(Tensor(pred), np.array(target)).item() == expected
    assert mae(Tensor(pred), np.array(target)).item() == expected


def test_metric_shape_mismatch():
    with pytest.raises(DimensionError):
        mse(Tensor([1.0, 2.0]), np.zeros(3))


# --- Adam ---

def scalar_param(value=0.0) -> Parameter:
    return Parameter("model/theta", Tensor([value], requires_grad=True))


def test_adam_first_step():
    p = scalar_param()
    state = AdamState.create([p], lr=0.1)
    p.tensor.grad = np.array([1.0])
    adam_step([p], state)
    assert state.t == 1
    assert p.tensor.data[0] == pytest.approx(-0.1 / (1.0 + 1e-8), abs=1e-15)


def test_adam_zero_gradient_keeps_value():
    p = scalar_param(2.5)
    state = AdamState.create([p], lr=0.1)
    p.tensor.grad = np.array([0.0])
    adam_step([p], state)
    assert p.tensor.data[0] == 2.5


def test_adam_matches_hand_rolled_trajectory():
    grads = [0.5, -1.5, 2.0]
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    theta, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)

    p = scalar_param(1.0)
    state = AdamState.create([p], lr=lr)
    for g in grads:
        p.tensor.grad = np.array([g])
        adam_step([p], state)
    assert state.t == 3
    assert abs(p.tensor.data[0] - theta) < 1e-12


def test_grad_clip_scales_update():
    clipped, free = scalar_param(), scalar_param()
    s1, s2 = AdamState.create([clipped], 0.1), AdamState.create([free], 0.1)
    clipped.tensor.grad = np.array([100.0])
    free.tensor.grad = np.array([100.0])
    adam_step([clipped], s1, grad_clip=1.0)
    adam_step([free], s2)
    # Adam ist skaleninvariant, die Momente aber nicht
    assert s1.m["model/theta"][0] == pytest.approx(0.1)
    assert s2.m["model/theta"][0] == pytest.approx(10.0)


# --- Trainingsschleife ---

def test_one_epoch_plumbing(toy_data):
    model = TimeMachineModel(toy_model_config())
    result = train_loop(model, toy_data, TrainConfig(epochs=1, batch_size=16))
    assert len(result.rows) == 1
    assert result.best_epoch == 1
    assert evaluate(model, toy_data.val).mse == pytest.approx(result.best_val_mse, rel=1e-12)


def test_zero_learning_rate_freezes_parameters(toy_data):
    model = TimeMachineModel(toy_model_config())
    before = model.state_arrays()
    train_loop(model, toy_data, TrainConfig(epochs=1, batch_size=16, lr=0.0))
    after = model.state_arrays()
    for name, value in before.items():
        np.testing.assert_array_equal(after[name], value)


def test_identical_seeds_give_identical_logs(toy_data):
    config = TrainConfig(epochs=2, batch_size=16, log_wall_time=False, seed=5)
    rows_a = train_loop(TimeMachineModel(toy_model_config()), toy_data, config).rows
    rows_b = train_loop(TimeMachineModel(toy_model_config()), toy_data, config).rows
    assert [r.to_dict() for r in rows_a] == [r.to_dict() for r in rows_b]
    assert all(r.seconds == 0.0 for r in rows_a)


def test_prefetch_does_not_change_training(toy_data):
    base = TrainConfig(epochs=1, batch_size=16, log_wall_time=False)
    threaded = TrainConfig(epochs=1, batch_size=16, log_wall_time=False, prefetch=2)
    a = train_loop(TimeMachineModel(toy_model_config()), toy_data, base).rows
    b = train_loop(TimeMachineModel(toy_model_config()), toy_data, threaded).rows
    assert [r.to_dict() for r in a] == [r.to_dict() for r in b]


def test_best_epoch_is_restored(toy_data):
    model = TimeMachineModel(toy_model_config())
    result = train_loop(model, toy_data, TrainConfig(epochs=3, batch_size=8, lr=0.01))
    best_row = min(result.rows, key=lambda r: r.val_mse)
    assert result.best_epoch == best_row.epoch
    for name, value in result.best_arrays.items():
        np.testing.assert_array_equal(model.state_arrays()[name], value)


def test_on_epoch_callback(toy_data):
    seen = []
    train_loop(
        TimeMachineModel(toy_model_config()),
        toy_data,
        TrainConfig(epochs=2, batch_size=16),
        on_epoch=seen.append,
    )
    assert [row.epoch for row in seen] == [1, 2]


def test_non_finite_loss_aborts_with_diagnostics(toy_data):
    model = TimeMachineModel(toy_model_config())
    model.P2.bias.data[:] = 1e300
    with pytest.raises(NumericalError) as exc:
        train_loop(model, toy_data, TrainConfig(epochs=1, batch_size=16))
    diagnostics = exc.value.diagnostics
    assert diagnostics["epoch"] == 1 and diagnostics["batch"] == 0
    assert diagnostics["parameter_norms"]


# --- Evaluation ---

def test_identity_task_scores_zero():
    """Ein Modell, das die Wahrheit liefert, hat MSE = MAE = 0."""

    class Oracle:
        config = toy_model_config(channels=1, lookback=2, horizon=2)

        def __call__(self, x, training=False):
            # Ziel = Eingabe: jede Zeitreihe ist 0, 0, 0, ...
            return Tensor(np.zeros(x.shape[:2] + (2,)))

    windows = make_windows(np.zeros((10, 1)), 2, 2)
    metrics = evaluate(Oracle(), windows)
    assert metrics.mse == 0.0 and metrics.mae == 0.0 and metrics.windows == 7


def test_evaluate_refuses_channel_mismatch(toy_data):
    model = TimeMachineModel(toy_model_config(channels=3))
    with pytest.raises(CheckpointError) as exc:
        evaluate(model, toy_data.test)
    assert "M=3" in str(exc.value) and "M=2" in str(exc.value)


def test_persistence_baseline_by_hand():
    values = np.array([[0.0], [1.0], [2.0], [3.0], [4.0]])
    windows = make_windows(values, 2, 2)
    metrics = persistence_baseline(windows)
    # Fenster 0: letzter Wert 1 gegen [2, 3]; Fenster 1: 2 gegen [3, 4]
    assert metrics.mse == pytest.approx((1 + 4 + 1 + 4) / 4)
    assert metrics.mae == pytest.approx((1 + 2 + 1 + 2) / 4)


def test_predict_window_matches_evaluate(toy_data):
    model = TimeMachineModel(toy_model_config())
    truth, pred = predict_window(model, toy_data.test, 2)
    x, y = toy_data.test.window(2)
    np.testing.assert_array_equal(truth, y)
    batch_pred = model(Tensor(toy_data.test.batch([2])[0])).data[0].T
    np.testing.assert_allclose(pred, batch_pred, atol=1e-14)


# --- Lernbarkeit (langsam) ---

@pytest.mark.slow
def test_sinusoid_is_learnable(tmp_path):
    data = prepare_data(
        sinusoid_csv(tmp_path / "long.csv", length=2000, channels=1), "ratio", lookback=96, horizon=24
    )
    config = ModelConfig(
        lookback=96, horizon=24, channels=1, n1=64, n2=32, d_state=16, dropout=0.0, seed=1
    )
    result = train_loop(TimeMachineModel(config), data, TrainConfig(epochs=50, batch_size=32))
    assert result.rows[9].train_mse < result.rows[0].train_mse
    assert result.best_val_mse < 1e-2


@pytest.mark.slow
@pytest.mark.skipif(not os.environ.get("TM_ETTH1_CSV"), reason="TM_ETTH1_CSV nicht gesetzt")
def test_etth1_desk_benchmark_beats_persistence():
    data = prepare_data(os.environ["TM_ETTH1_CSV"], "etth", lookback=96, horizon=96)
    config = ModelConfig(
        lookback=96, horizon=96, channels=7, n1=64, n2=32, d_state=16, dropout=0.7, seed=2024
    )
    model = TimeMachineModel(config)
    train_loop(model, data, TrainConfig(epochs=10, batch_size=32))
    assert evaluate(model, data.test).mse < persistence_baseline(data.test).mse
