"""Tests für den Mamba-Block."""
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src.core.errors import DimensionError
from src.core.mamba import MambaBlock, mamba_param_count
from src.core.numerics import (
    Tensor,
    causal_conv1d,
    gradcheck,
    make_rng,
    reduce_mean,
    silu,
)
from src.core.ssm import selective_scan


def make_block(d_model=3, seed=0, **kwargs) -> MambaBlock:
    return MambaBlock(d_model, make_rng(seed), **kwargs)


@pytest.mark.parametrize("expand,d_state,width", [(1, 2, 2), (2, 4, 3), (1, 16, 4)])
def test_shape_preserved(expand, d_state, width):
    block = make_block(32, expand=expand, d_state=d_state, conv_width=width)
    x = Tensor(make_rng(1).standard_normal((7, 32)))
    assert block(x).shape == (7, 32)


def test_batched_leading_axes():
    block = make_block(5, d_state=3)
    x = Tensor(make_rng(1).standard_normal((2, 4, 6, 5)))
    assert block(x).shape == (2, 4, 6, 5)


def test_zero_input_with_zero_biases_gives_zero():
    block = make_block(4, d_state=3)
    for p in block.parameters():
        if p.name.endswith("bias") and "delta" not in p.name:
            p.tensor.data[:] = 0.0
    y = block(Tensor(np.zeros((5, 4))))
    np.testing.assert_array_equal(y.data, 0.0)


def test_d_model_mismatch():
    with pytest.raises(DimensionError):
        make_block(3)(Tensor(np.zeros((4, 5))))


def test_gradcheck_all_parameters():
    rng = make_rng(0)
    block = MambaBlock(3, rng, expand=1, d_state=2, conv_width=2)
    x = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    inputs = [x] + [p.tensor for p in block.parameters()]
    assert gradcheck(lambda: reduce_mean(block(x)), inputs) < 1e-4


def test_causality_end_to_end():
    block = make_block(3, d_state=4, conv_width=3)
    x = make_rng(2).standard_normal((8, 3))
    base = block(Tensor(x)).data
    for t in range(8):
        bumped = x.copy()
        bumped[t] -= 2.0
        np.testing.assert_array_equal(block(Tensor(bumped)).data[:t], base[:t])


def test_open_gate_decomposition():
    """Gate fest auf 1: Block = out_proj(scan(silu(conv(in_proj_a(x)))))."""
    block = make_block(3, d_state=2)
    block.in_proj_b.weight.data[:] = 0.0
    # silu(b) = 1 für b ≈ 1.2784645427610738
    block.in_proj_b.bias.data[:] = 1.2784645427610738
    gate = silu(Tensor(block.in_proj_b.bias.data)).data
    np.testing.assert_allclose(gate, 1.0, atol=1e-12)

    x = Tensor(make_rng(4).standard_normal((6, 3)))
    branch = silu(causal_conv1d(block.in_proj_a(x), block.conv_kernel, block.conv_bias))
    expected = block.out_proj(selective_scan(branch, block.ssm)).data
    np.testing.assert_allclose(block(x).data, expected, atol=1e-10)


def test_param_count_matches_instance():
    for d_model, expand, d_state, width, skip in [(3, 1, 2, 2, True), (8, 2, 5, 3, False)]:
        block = make_block(d_model, expand=expand, d_state=d_state, conv_width=width, use_skip_d=skip)
        enumerated = sum(p.tensor.size for p in block.parameters())
        assert enumerated == mamba_param_count(d_model, expand, d_state, width, skip)
