"""Tests für Diskretisierung, selektiven Scan und das unabhängige Orakel."""
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src.core import ssm
from src.core.errors import ContractError
from src.core.numerics import Tensor, gradcheck, make_rng, mul, reduce_sum
from src.core.ssm import (
    SERIES_THRESHOLD,
    SsmParams,
    discretize,
    scan_oracle,
    selective_scan,
    selectivity,
)
from src.core.verify import check_scan_oracle, check_zoh_branches


def make_params(d_inner=4, d_state=8, seed=0, **kwargs) -> SsmParams:
    return SsmParams(d_inner, d_state, make_rng(seed), **kwargs)


# --- selectivity ---

def test_selectivity_zero_token():
    params = make_params(3, 2)
    params.delta_bias.data[:] = 0.0
    b, c, delta = selectivity(Tensor(np.zeros(3)), params)
    np.testing.assert_array_equal(b.data, 0.0)
    np.testing.assert_array_equal(c.data, 0.0)
    np.testing.assert_allclose(delta.data, np.log(2.0), atol=1e-15)


def test_selectivity_frozen_state():
    params = make_params(3, 2)
    params.delta_bias.data[:] = -20.0
    _, _, delta = selectivity(Tensor(np.zeros(3)), params)
    np.testing.assert_allclose(delta.data, np.exp(-20.0), rtol=1e-6)


def test_delta_positive_on_random_tokens():
    params = make_params(4, 2)
    tokens = Tensor(make_rng(9).standard_normal((10_000, 4)) * 3.0)
    _, _, delta = selectivity(tokens, params)
    assert (delta.data > 0).all()


# --- discretize ---

def test_discretize_analytic_value():
    a_bar, b_bar = discretize(np.array([[-np.log(2.0)]]), np.array([1.0]), np.array([1.0]))
    assert a_bar[0, 0] == pytest.approx(0.5, abs=1e-15)
    assert b_bar[0, 0] == pytest.approx(0.5 / np.log(2.0), abs=1e-12)


def test_discretize_small_delta_limit():
    a_bar, b_bar = discretize(np.array([[-1.0]]), np.array([2.0]), np.array([1e-9]))
    assert a_bar[0, 0] == pytest.approx(1.0, abs=1e-8)
    assert b_bar[0, 0] == pytest.approx(2e-9, rel=1e-6)


@pytest.mark.parametrize("side", [0.999, 1.001])
@pytest.mark.parametrize("sign", [1.0, -1.0])
def test_zoh_factor_matches_closed_form_around_switch(sign, side):
    z = sign * SERIES_THRESHOLD * side
    factor = ssm._zoh_factor(np.array([z]))[0]
    # Abbruchfehler der Reihe ~ z^3/24, Rundung von expm1(z)/z ~ eps
    assert abs(factor - np.expm1(z) / z) < 1e-14


@pytest.mark.parametrize("side", [0.999, 1.001])
def test_discretize_matches_closed_form_around_switch(side):
    delta = SERIES_THRESHOLD * side
    a_bar, b_bar = discretize(np.array([[-1.0]]), np.array([1.0]), np.array([delta]))
    assert a_bar[0, 0] == pytest.approx(np.exp(-delta), rel=1e-14)
    assert b_bar[0, 0] == pytest.approx(-np.expm1(-delta), rel=1e-12)


def test_zoh_check_rejects_broken_discretization(monkeypatch):
    original = ssm.discretize

    def flipped(a, b_k, delta_k):
        a_bar, b_bar = original(a, b_k, delta_k)
        return a_bar, -b_bar

    assert check_zoh_branches().passed
    monkeypatch.setattr(ssm, "discretize", flipped)
    assert not check_zoh_branches().passed


def test_discretize_rejects_nonnegative_a():
    with pytest.raises(ContractError):
        discretize(np.array([[0.0, -1.0]]), np.array([1.0, 1.0]), np.array([0.1]))


def test_state_matrix_strictly_negative():
    params = make_params(3, 5)
    assert (params.state_matrix().data < 0).all()
    np.testing.assert_allclose(params.a_log.data[0], np.log(np.arange(1, 6)))


# --- selective_scan ---

def test_zero_input_gives_zero_output():
    params = make_params()
    out = selective_scan(Tensor(np.zeros((7, 4))), params)
    np.testing.assert_array_equal(out.data, 0.0)


def test_single_step_closed_form():
    params = make_params(1, 2, seed=3)
    u = np.array([[0.7]])
    b, c, delta = selectivity(Tensor(u[0]), params)
    a = -np.exp(params.a_log.data)
    _, b_bar = discretize(a, b.data, delta.data)
    expected = c.data @ (b_bar[0] * u[0, 0]) + params.skip_d.data[0] * u[0, 0]
    out = selective_scan(Tensor(u), params).data
    assert out[0, 0] == pytest.approx(expected, abs=1e-14)


def test_scan_matches_oracle_random_instance():
    params = make_params(4, 8, seed=5)
    u = Tensor(make_rng(6).standard_normal((32, 4)))
    diff = np.max(np.abs(selective_scan(u, params).data - scan_oracle(u, params)))
    assert diff < 1e-12


def test_scan_matches_oracle_batched():
    params = make_params(3, 4, seed=1)
    u = Tensor(make_rng(2).standard_normal((2, 5, 6, 3)))
    np.testing.assert_allclose(selective_scan(u, params).data, scan_oracle(u, params), atol=1e-12)


def test_scan_oracle_sweep():
    assert check_scan_oracle(100, seed=4).passed


def test_scan_without_skip_term():
    params = make_params(2, 3, use_skip_d=False)
    assert params.skip_d is None
    u = Tensor(make_rng(0).standard_normal((5, 2)))
    np.testing.assert_allclose(selective_scan(u, params).data, scan_oracle(u, params), atol=1e-12)


def test_memoryless_limit():
    params = make_params(2, 3, seed=8)
    params.delta_bias.data[:] = 40.0
    params.a_log.data[:] = np.log(50.0)
    params.w_delta_down.data[:] = 0.0
    rng = make_rng(3)
    u = rng.standard_normal((6, 2))
    base = selective_scan(Tensor(u), params).data
    changed = u.copy()
    changed[:5] = rng.standard_normal((5, 2))
    out = selective_scan(Tensor(changed), params).data
    assert abs(out[5] - base[5]).max() < 1e-12


def test_scan_causality():
    params = make_params(3, 4, seed=2)
    u = make_rng(1).standard_normal((9, 3))
    base = selective_scan(Tensor(u), params).data
    for j in range(9):
        bumped = u.copy()
        bumped[j] += 1.0
        out = selective_scan(Tensor(bumped), params).data
        np.testing.assert_array_equal(out[:j], base[:j])


def test_abar_inside_unit_interval():
    params = make_params(4, 8)
    _, _, delta = selectivity(Tensor(make_rng(0).standard_normal((20, 4))), params)
    a_bar, _ = discretize(params.state_matrix(), np.zeros((20, 8)), delta)
    assert ((a_bar > 0) & (a_bar < 1)).all()


@pytest.mark.parametrize("seed", range(3))
def test_scan_gradcheck(seed):
    rng = make_rng(seed)
    params = SsmParams(3, 4, rng)
    u = Tensor(rng.standard_normal((8, 3)), requires_grad=True)
    g = rng.standard_normal((8, 3))
    inputs = [u] + [p.tensor for p in params.parameters()]
    assert gradcheck(lambda: reduce_sum(mul(selective_scan(u, params), g)), inputs) < 1e-4


def test_sign_flip_in_discretize_is_caught_by_oracle(monkeypatch):
    def flipped(a, b_k, delta_k):
        a_bar, b_bar = discretize(a, b_k, delta_k)
        return a_bar, -b_bar

    monkeypatch.setattr(ssm, "discretize", flipped)
    result = check_scan_oracle(5)
    assert not result.passed
    assert result.max_error > 1e-6
