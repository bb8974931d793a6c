"""Mamba-Block: zwei Zweige um den selektiven Scan.

Zweig 1: Projektion -> kausale Faltung -> SiLU -> SSM.
Zweig 2: Projektion -> SiLU (Gate).
Ausgabe: out_proj(Zweig1 * Zweig2), shape-erhaltend über die Sequenz.
"""

import numpy as np

from src.core.errors import DimensionError
from src.core.numerics import Linear, Module, Tensor, causal_conv1d, mul, silu, uniform
from src.core.ssm import SsmParams, selective_scan


class MambaBlock(Module):
    """Ein Mamba-Block für Tokens der Dimension d_model.

    Attributes:
        d_model: Token-Dimension am Ein- und Ausgang.
        expand: Expansionsfaktor E (innere Dimension E * d_model).
        d_state: State-Größe N.
        conv_width: Breite w der depthwise kausalen Faltung.
    """

    def __init__(
        self,
        d_model: int,
        rng: np.random.Generator,
        expand: int = 1,
        d_state: int = 256,
        conv_width: int = 2,
        dtype=np.float64,
        use_skip_d: bool = True,
    ) -> None:
        super().__init__()
        self.d_model = d_model
        self.expand = expand
        self.d_state = d_state
        self.conv_width = conv_width
        d_inner = expand * d_model
        self.d_inner = d_inner

        self.in_proj_a = self.add_module("in_proj_a", Linear(d_model, d_inner, rng, dtype))
        self.in_proj_b = self.add_module("in_proj_b", Linear(d_model, d_inner, rng, dtype))
        bound = 1.0 / np.sqrt(conv_width)
        self.conv_kernel = self.add_parameter(
            "conv_kernel", uniform(rng, (conv_width, d_inner), bound, dtype)
        )
        self.conv_bias = self.add_parameter("conv_bias", uniform(rng, (d_inner,), bound, dtype))
        self.ssm = self.add_module(
            "ssm", SsmParams(d_inner, d_state, rng, dtype=dtype, use_skip_d=use_skip_d)
        )
        self.out_proj = self.add_module("out_proj", Linear(d_inner, d_model, rng, dtype))

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        """x [..., seq, d_model] -> y [..., seq, d_model].

        `training` ist Teil des Vertrags, der Block selbst hat kein Dropout.
        """
        if x.data.ndim < 2 or x.shape[-1] != self.d_model:
            raise DimensionError(
                f"Mamba-Block erwartet [..., seq, {self.d_model}], erhalten: {list(x.shape)}"
            )
        branch = silu(causal_conv1d(self.in_proj_a(x), self.conv_kernel, self.conv_bias))
        scanned = selective_scan(branch, self.ssm)
        gate = silu(self.in_proj_b(x))
        return self.out_proj(mul(scanned, gate))

    __call__ = forward


def mamba_param_count(d_model: int, expand: int, d_state: int, conv_width: int, use_skip_d: bool) -> int:
    """Geschlossene Parameterzahl eines MambaBlock."""
    d_inner = expand * d_model
    projections = 2 * (d_model * d_inner + d_inner) + (d_inner * d_model + d_model)
    conv = conv_width * d_inner + d_inner
    ssm = 3 * d_inner * d_state + 2 * d_inner + d_inner + (d_inner if use_skip_d else 0)
    return projections + conv + ssm
