"""Tests für RevIN, Kanalmodi, Vorwärtsdurchlauf und Parameterzählung."""
import logging
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src.config.defaults import ChannelMode, ModelConfig
from src.core.errors import ConfigError, DimensionError
from src.core.model import (
    RevIN,
    TimeMachineModel,
    count_params,
    normalize,
    parameter_scaling,
    resolve_channel_mode,
)
from src.core.numerics import Tensor, make_rng
from src.core.verify import check_model_gradients, check_mode_equivalence, toy_config


def small_config(**changes) -> ModelConfig:
    base = dict(lookback=16, horizon=8, channels=3, n1=8, n2=4, d_state=2, dropout=0.0, seed=1)
    base.update(changes)
    return ModelConfig(**base)


# --- Kanalmodus ---

@pytest.mark.parametrize(
    "channels,lookback,expected",
    [(862, 96, ChannelMode.MIXING), (7, 96, ChannelMode.INDEPENDENCE), (48, 96, ChannelMode.MIXING),
     (47, 96, ChannelMode.INDEPENDENCE)],
)
def test_auto_mode_resolution(channels, lookback, expected):
    assert resolve_channel_mode(channels, lookback, "auto") is expected


def test_explicit_mode_passes_through():
    assert resolve_channel_mode(862, 96, "independence") is ChannelMode.INDEPENDENCE
    assert resolve_channel_mode(1, 96, ChannelMode.MIXING) is ChannelMode.MIXING


def test_auto_mode_choice_is_logged_as_warning(caplog):
    with caplog.at_level(logging.WARNING, logger="src.core.model"):
        TimeMachineModel(small_config(channel_mode="auto"))
    assert any("independence" in r.getMessage() and r.levelno == logging.WARNING for r in caplog.records)
    caplog.clear()
    with caplog.at_level(logging.WARNING, logger="src.core.model"):
        TimeMachineModel(small_config(channel_mode="mixing"))
    assert not caplog.records


# --- Normalisierung ---

def test_revin_constant_channel_maps_to_zero():
    revin = RevIN(2)
    x = Tensor(np.full((1, 2, 10), 3.5))
    y, _ = revin.normalize(x)
    np.testing.assert_array_equal(y.data, 0.0)


def test_revin_standardized_input_unchanged():
    rng = make_rng(0)
    raw = rng.standard_normal((2, 3, 50))
    raw = (raw - raw.mean(axis=-1, keepdims=True)) / raw.std(axis=-1, keepdims=True)
    y, _ = RevIN(3).normalize(Tensor(raw))
    np.testing.assert_allclose(y.data, raw, atol=1e-6)


def test_revin_round_trip():
    x = Tensor(make_rng(1).standard_normal((4, 3, 20)) * 7.0 - 2.0)
    revin = RevIN(3)
    y, state = revin.normalize(x)
    np.testing.assert_allclose(revin.denormalize(y, state).data, x.data, atol=1e-6)


def test_normalize_none_and_zscore_are_identity():
    x = Tensor(make_rng(2).standard_normal((1, 2, 5)))
    for mode in ("none", "zscore_internal"):
        y, state = normalize(x, mode)
        assert y is x and state is None


def test_normalize_revin_needs_module():
    with pytest.raises(ConfigError):
        normalize(Tensor(np.zeros((1, 1, 3))), "revin")


# --- Vorwärtsdurchlauf ---

@pytest.mark.parametrize("mode", ["mixing", "independence"])
def test_forward_shape(mode):
    model = TimeMachineModel(small_config(channel_mode=mode))
    y = model(Tensor(make_rng(3).standard_normal((2, 3, 16))))
    assert y.shape == (2, 3, 8)


@pytest.mark.parametrize("mode", ["mixing", "independence"])
@pytest.mark.parametrize("lookback", [8, 96])
@pytest.mark.parametrize("horizon", [4, 24])
@pytest.mark.parametrize("channels", [1, 7])
def test_forward_shape_grid(mode, lookback, horizon, channels):
    config = small_config(
        lookback=lookback, horizon=horizon, channels=channels, channel_mode=mode
    )
    x = Tensor(make_rng(3).standard_normal((2, channels, lookback)))
    assert TimeMachineModel(config)(x).shape == (2, channels, horizon)


def test_forward_shape_benchmark_sizes():
    config = ModelConfig(lookback=96, horizon=96, channels=7, n1=32, n2=16, d_state=4)
    model = TimeMachineModel(config)
    assert model.mode is ChannelMode.INDEPENDENCE
    assert model(Tensor(make_rng(0).standard_normal((2, 7, 96)))).shape == (2, 7, 96)


def test_forward_rejects_wrong_input_shape():
    model = TimeMachineModel(small_config())
    with pytest.raises(DimensionError) as exc:
        model(Tensor(np.zeros((2, 4, 16))))
    assert "Eingabe" in str(exc.value)


def test_constant_input_predicts_constant():
    model = TimeMachineModel(small_config(channel_mode="independence"))
    for p in model.parameters():
        if p.name.endswith("bias") and "delta" not in p.name:
            p.tensor.data[:] = 0.0
    levels = np.array([1.5, -2.0, 10.0])
    x = Tensor(np.broadcast_to(levels[None, :, None], (2, 3, 16)).copy())
    y = model(x).data
    np.testing.assert_allclose(y, np.broadcast_to(levels[None, :, None], (2, 3, 8)), atol=1e-12)


def test_forward_is_deterministic():
    x = Tensor(make_rng(5).standard_normal((2, 3, 16)))
    a = TimeMachineModel(small_config(dropout=0.3))
    b = TimeMachineModel(small_config(dropout=0.3))
    np.testing.assert_array_equal(a(x).data, b(x).data)
    ya = a(x, training=True, rng=make_rng(9)).data
    yb = b(x, training=True, rng=make_rng(9)).data
    np.testing.assert_array_equal(ya, yb)


def test_dropout_only_active_in_training():
    model = TimeMachineModel(small_config(dropout=0.5))
    x = Tensor(make_rng(5).standard_normal((2, 3, 16)))
    eval_out = model(x).data
    np.testing.assert_array_equal(model(x).data, eval_out)
    assert not np.allclose(model(x, training=True, rng=make_rng(1)).data, eval_out)


def test_residual_paths_are_live():
    x = Tensor(make_rng(6).standard_normal((1, 3, 16)))
    with_res = TimeMachineModel(small_config())
    without = TimeMachineModel(small_config(use_residual=False))
    assert not np.allclose(with_res(x).data, without(x).data)


def test_mode_equivalence_for_single_channel():
    assert check_mode_equivalence().passed
    x = Tensor(make_rng(5).standard_normal((2, 1, 16)))
    mixing = TimeMachineModel(small_config(channels=1, channel_mode="mixing"))
    independence = TimeMachineModel(small_config(channels=1, channel_mode="independence"))
    np.testing.assert_array_equal(mixing(x).data, independence(x).data)


def test_float32_forward():
    model = TimeMachineModel(small_config(dtype="float32"))
    y = model(Tensor(make_rng(0).standard_normal((1, 3, 16))))
    assert y.dtype == np.float32


def test_end_to_end_gradcheck():
    result = check_model_gradients()
    assert result.passed, result.max_error


def test_missing_channels_is_config_error():
    with pytest.raises(ConfigError):
        TimeMachineModel(ModelConfig(channels=None))


def test_n1_must_exceed_n2():
    with pytest.raises(ConfigError):
        small_config(n1=4, n2=8).validate()


# --- Parameterzählung ---

def test_count_matches_enumeration():
    for config in (toy_config(), small_config(channel_mode="mixing"), small_config(revin_affine=False)):
        enumerated = sum(p.tensor.size for p in TimeMachineModel(config).parameters())
        assert enumerated == count_params(config)


def test_count_affine_in_lookback():
    config = small_config(lookback=96, channels=7)
    rows = parameter_scaling(config, [96, 192, 336])
    counts = [c for _, c in rows]
    assert counts[1] - counts[0] == 96 * config.n1
    assert counts[2] - counts[1] == 144 * config.n1


def test_count_horizon_only_through_p2():
    base = small_config(lookback=96, channels=7, horizon=96)
    longer = small_config(lookback=96, channels=7, horizon=192)
    assert count_params(longer) - count_params(base) == 96 * (2 * base.n1 + 1)
