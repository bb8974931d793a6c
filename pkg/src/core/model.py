"""TimeMachine-Netz: Normalisierung, zweistufiges Embedding, vier Mambas.

Ablauf von forward() für x [B, M, L]:
    x0 = normalize(x)
    independence: [B, M, L] -> [B*M, 1, L]
    x1 = E1(x0), u1 = DO(x1); x2 = E2(u1), u2 = DO(x2)
    x3 = innen_seq(u2) + T(innen_trans(T(u2))) + x2
    x4 = P1(x3)
    x5 = außen_seq(u1) + T(außen_trans(T(u1)))
    x6 = x5 || (x4 + x1)
    y  = denormalize(P2(x6))  -> [B, M, T]
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from src.config.defaults import NORM_EPS, ChannelMode, ModelConfig, NormMode
from src.core.errors import ConfigError, DimensionError
from src.core.mamba import MambaBlock, mamba_param_count
from src.core.numerics import (
    Linear,
    Module,
    Tensor,
    add,
    concat,
    div,
    dropout,
    make_rng,
    mul,
    reshape,
    sub,
    transpose,
)

logger = logging.getLogger(__name__)


def resolve_channel_mode(channels: int, lookback: int, mode) -> ChannelMode:
    """Löst 'auto' auf: mixing genau dann, wenn M >= L/2."""
    mode = ChannelMode(mode) if not isinstance(mode, ChannelMode) else mode
    if mode is not ChannelMode.AUTO:
        return mode
    return ChannelMode.MIXING if 2 * channels >= lookback else ChannelMode.INDEPENDENCE


@dataclass
class RevInState:
    """Statistiken eines Vorwärtsdurchlaufs pro (Instanz, Kanal), je [B, M, 1]."""
    mean: np.ndarray
    std: np.ndarray


class RevIN(Module):
    """Reversible Instanz-Normalisierung über die L-Achse.

    std wird nach unten durch eps begrenzt, ein konstanter Kanal wird so auf
    Nullen abgebildet.
    """

    def __init__(self, channels: int, affine: bool = True, eps: float = NORM_EPS, dtype=np.float64) -> None:
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.gain: Optional[Tensor] = None
        self.shift: Optional[Tensor] = None
        if affine:
            self.gain = self.add_parameter("gain", Tensor(np.ones((channels, 1)), dtype=dtype))
            self.shift = self.add_parameter("shift", Tensor(np.zeros((channels, 1)), dtype=dtype))

    def normalize(self, x: Tensor) -> tuple[Tensor, RevInState]:
        mean = x.data.mean(axis=-1, keepdims=True)
        std = np.maximum(x.data.std(axis=-1, keepdims=True), self.eps)
        state = RevInState(mean=mean, std=std)
        y = div(sub(x, mean), std)
        if self.gain is not None:
            y = add(mul(y, self.gain), self.shift)
        return y, state

    def denormalize(self, y: Tensor, state: RevInState) -> Tensor:
        if self.gain is not None:
            y = div(sub(y, self.shift), add(self.gain, self.eps * self.eps))
        return add(mul(y, state.std), state.mean)


def normalize(x: Tensor, mode, revin: Optional[RevIN] = None) -> tuple[Tensor, Optional[RevInState]]:
    """Normalisierung vor dem Netz.

    revin: Instanz-Standardisierung mit gemerkter Statistik. zscore_internal
    und none sind hier die Identität (Z-Score übernimmt der Daten-Scaler).
    """
    mode = NormMode(mode) if not isinstance(mode, NormMode) else mode
    if mode is NormMode.REVIN:
        if revin is None:
            raise ConfigError("norm_mode=revin braucht ein RevIN-Modul")
        return revin.normalize(x)
    return x, None


class TimeMachineModel(Module):
    """Das vollständige Netz für einen Datensatz mit festem M, L und T."""

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        config.validate()
        if config.channels is None:
            raise ConfigError("model.channels ist nicht gesetzt (Datensatz noch nicht geladen?)")
        self.config = config
        self.mode = resolve_channel_mode(config.channels, config.lookback, config.channel_mode)
        if ChannelMode(config.channel_mode) is ChannelMode.AUTO:
            logger.warning(
                f"channel_mode=auto aufgelöst zu '{self.mode.value}' "
                f"(M={config.channels}, L={config.lookback})"
            )
        dtype = np.dtype(config.dtype)
        rng = make_rng(config.seed)
        n1, n2 = config.n1, config.n2
        token_channels = config.channels if self.mode is ChannelMode.MIXING else 1

        def mamba(d_model: int) -> MambaBlock:
            return MambaBlock(
                d_model,
                rng,
                expand=config.expand,
                d_state=config.d_state,
                conv_width=config.conv_width,
                dtype=dtype,
                use_skip_d=config.use_skip_d,
            )

        self.E1 = self.add_module("E1", Linear(config.lookback, n1, rng, dtype))
        self.E2 = self.add_module("E2", Linear(n1, n2, rng, dtype))
        self.mamba_inner_seq = self.add_module("mamba_inner_seq", mamba(n2))
        self.mamba_inner_trans = self.add_module("mamba_inner_trans", mamba(token_channels))
        self.mamba_outer_seq = self.add_module("mamba_outer_seq", mamba(n1))
        self.mamba_outer_trans = self.add_module("mamba_outer_trans", mamba(token_channels))
        self.P1 = self.add_module("P1", Linear(n2, n1, rng, dtype))
        self.P2 = self.add_module("P2", Linear(2 * n1, config.horizon, rng, dtype))
        self.revin: Optional[RevIN] = None
        if config.norm_mode_enum is NormMode.REVIN:
            self.revin = self.add_module(
                "revin", RevIN(config.channels, affine=config.revin_affine, dtype=dtype)
            )
        logger.debug(
            f"TimeMachine aufgebaut: Modus={self.mode.value}, "
            f"{count_params(config)} Parameter"
        )

    @staticmethod
    def _pair(block_seq: MambaBlock, block_trans: MambaBlock, u: Tensor, training: bool) -> Tensor:
        """Ein Mamba-Paar: Sequenz-Sicht plus transponierte Sicht."""
        v_left = block_seq(u, training)
        v_right = transpose(block_trans(transpose(u), training))
        return add(v_left, v_right)

    def forward(
        self,
        x: Tensor,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        """x [B, M, L] -> y [B, M, T] in beiden Kanalmodi.

        Raises:
            DimensionError: Wenn x nicht zu (M, L) der Konfiguration passt.
        """
        cfg = self.config
        if x.data.ndim != 3 or x.shape[1:] != (cfg.channels, cfg.lookback):
            raise DimensionError(
                f"Stufe 'Eingabe': erwartet [B, {cfg.channels}, {cfg.lookback}], "
                f"erhalten {list(x.shape)}"
            )
        if x.dtype != np.dtype(cfg.dtype):
            x = Tensor(x.data, dtype=cfg.dtype)
        batch = x.shape[0]

        x0, revin_state = normalize(x, cfg.norm_mode_enum, self.revin)
        if self.mode is ChannelMode.INDEPENDENCE:
            x0 = reshape(x0, (batch * cfg.channels, 1, cfg.lookback))

        x1 = self.E1(x0)
        u1 = dropout(x1, cfg.dropout, training, rng)
        x2 = self.E2(u1)
        u2 = dropout(x2, cfg.dropout, training, rng)

        x3 = self._pair(self.mamba_inner_seq, self.mamba_inner_trans, u2, training)
        if cfg.use_residual:
            x3 = add(x3, x2)
        x4 = self.P1(x3)
        x5 = self._pair(self.mamba_outer_seq, self.mamba_outer_trans, u1, training)
        x6 = concat([x5, add(x4, x1) if cfg.use_residual else x4])
        y = self.P2(x6)

        if self.mode is ChannelMode.INDEPENDENCE:
            y = reshape(y, (batch, cfg.channels, cfg.horizon))
        if revin_state is not None:
            y = self.revin.denormalize(y, revin_state)
        return y

    __call__ = forward

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Übernimmt Parameterwerte nach vollem Namen (z.B. aus einem Checkpoint).

        Raises:
            DimensionError: Bei fehlenden Namen oder abweichenden Shapes.
        """
        params = {p.name: p.tensor for p in self.parameters()}
        missing = sorted(set(params) - set(arrays))
        if missing:
            raise DimensionError(f"Parameter fehlen: {', '.join(missing[:5])}")
        for name, tensor in params.items():
            value = arrays[name]
            if value.shape != tensor.shape:
                raise DimensionError(
                    f"Parameter '{name}': Shape {list(value.shape)} != {list(tensor.shape)}"
                )
            tensor.data = np.array(value, dtype=tensor.dtype, order="C")

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.tensor.data.copy() for p in self.parameters()}


def count_params(config: ModelConfig) -> int:
    """Exakte Zahl trainierbarer Skalare aus den Shapes (ohne Instanziierung)."""
    if config.channels is None:
        raise ConfigError("count_params braucht model.channels")
    mode = resolve_channel_mode(config.channels, config.lookback, config.channel_mode)
    n1, n2, horizon = config.n1, config.n2, config.horizon
    token_channels = config.channels if mode is ChannelMode.MIXING else 1

    def mamba(d_model: int) -> int:
        return mamba_param_count(
            d_model, config.expand, config.d_state, config.conv_width, config.use_skip_d
        )

    total = (config.lookback * n1 + n1) + (n1 * n2 + n2)
    total += (n2 * n1 + n1) + (2 * n1 * horizon + horizon)
    total += mamba(n1) + mamba(n2) + 2 * mamba(token_channels)
    if NormMode(config.norm_mode) is NormMode.REVIN and config.revin_affine:
        total += 2 * config.channels
    return total


def parameter_scaling(config: ModelConfig, lookbacks: Sequence[int]) -> list[tuple[int, int]]:
    """Parameterzahl über mehrere Look-back-Längen (Kanalmodus fest wie konfiguriert)."""
    base = config.to_dict()
    if ChannelMode(config.channel_mode) is ChannelMode.AUTO:
        base["channel_mode"] = resolve_channel_mode(
            config.channels, config.lookback, config.channel_mode
        ).value
    rows = []
    for lookback in lookbacks:
        variant = ModelConfig.from_dict({**base, "lookback": int(lookback)})
        rows.append((int(lookback), count_params(variant)))
    return rows
