"""Selektiver State-Space-Kern.

Diagonales kontinuierliches SSM mit exakter Zero-Order-Hold-Diskretisierung,
eingabeabhängigen B, C, Δ und sequentiellem Scan. scan_oracle() ist eine
unabhängige, ausgerollte Neuberechnung derselben Rekurrenz für Tests.

Shapes: u [..., seq, D], A [D, N], B/C [..., seq, N], Δ [..., seq, D].
"""

import logging
from typing import Optional

import numpy as np

from src.core.errors import ContractError, DimensionError
from src.core.numerics import (
    Module,
    Tensor,
    exp,
    matmul,
    neg,
    record,
    softplus,
    uniform,
)

logger = logging.getLogger(__name__)

# Unterhalb dieser |z| wird (e^z - 1)/z per Reihe ausgewertet
SERIES_THRESHOLD = 1e-5

# Δ-Initialisierung: softplus(Δ_bias) log-gleichverteilt in diesem Intervall
DELTA_INIT_RANGE = (1e-3, 1e-1)


class SsmParams(Module):
    """Koeffizienten eines selektiven SSM.

    A = -exp(a_log) ist strikt negativ; B, C und Δ werden pro Token aus der
    Eingabe projiziert.
    """

    def __init__(
        self,
        d_inner: int,
        d_state: int,
        rng: np.random.Generator,
        dtype=np.float64,
        use_skip_d: bool = True,
    ) -> None:
        super().__init__()
        self.d_inner = d_inner
        self.d_state = d_state
        # S4D-real: a_log[d, n] = ln(n + 1)
        a_log = np.tile(np.log(np.arange(1, d_state + 1, dtype=np.float64)), (d_inner, 1))
        self.a_log = self.add_parameter("a_log", Tensor(a_log, dtype=dtype))
        bound = 1.0 / np.sqrt(d_inner)
        self.w_b = self.add_parameter("w_b", uniform(rng, (d_inner, d_state), bound, dtype))
        self.w_c = self.add_parameter("w_c", uniform(rng, (d_inner, d_state), bound, dtype))
        self.w_delta_down = self.add_parameter(
            "w_delta_down", uniform(rng, (d_inner, 1), bound, dtype)
        )
        self.w_delta_up = self.add_parameter("w_delta_up", uniform(rng, (1, d_inner), 1.0, dtype))
        low, high = np.log(DELTA_INIT_RANGE[0]), np.log(DELTA_INIT_RANGE[1])
        dt = np.exp(rng.uniform(low, high, size=d_inner))
        # Inverse von softplus
        self.delta_bias = self.add_parameter(
            "delta_bias", Tensor(dt + np.log(-np.expm1(-dt)), dtype=dtype)
        )
        self.skip_d: Optional[Tensor] = None
        if use_skip_d:
            self.skip_d = self.add_parameter("skip_d", Tensor(np.ones(d_inner), dtype=dtype))

    def state_matrix(self) -> Tensor:
        """Diagonale A = -exp(a_log) als [D, N]."""
        return neg(exp(self.a_log))


def selectivity(u: Tensor, params: SsmParams) -> tuple[Tensor, Tensor, Tensor]:
    """Eingabeabhängige Koeffizienten für ein oder mehrere Tokens.

    Returns:
        (B, C, Δ) mit B, C [..., N] und Δ = softplus(Δ_bias + up(down(u))) > 0.
    """
    if u.shape[-1] != params.d_inner:
        raise DimensionError(
            f"selectivity: Token-Dimension {u.shape[-1]} != SSM-Dimension {params.d_inner}"
        )
    b = matmul(u, params.w_b)
    c = matmul(u, params.w_c)
    delta = softplus(matmul(matmul(u, params.w_delta_down), params.w_delta_up) + params.delta_bias)
    return b, c, delta


def _zoh_factor(z: np.ndarray) -> np.ndarray:
    """(e^z - 1)/z mit Reihenentwicklung um 0."""
    small = np.abs(z) < SERIES_THRESHOLD
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0 + z / 2.0 + z * z / 6.0, np.expm1(safe) / safe)


def _zoh_factor_grad(z: np.ndarray) -> np.ndarray:
    """Ableitung von (e^z - 1)/z nach z."""
    small = np.abs(z) < SERIES_THRESHOLD
    safe = np.where(small, 1.0, z)
    direct = (np.exp(safe) * (safe - 1.0) + 1.0) / (safe * safe)
    return np.where(small, 0.5 + z / 3.0 + z * z / 8.0, direct)


def _values(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def discretize(a, b_k, delta_k) -> tuple[np.ndarray, np.ndarray]:
    """Exakte ZOH-Diskretisierung der diagonalen A.

    Args:
        a: A [D, N], strikt negativ.
        b_k: B [..., N] eines Tokens.
        delta_k: Δ [..., D] eines Tokens.

    Returns:
        (Ā, B̄) je [..., D, N] mit Ā = exp(ΔA), B̄ = ((exp(ΔA) - 1)/(ΔA)) Δ B.

    Raises:
        ContractError: Wenn A einen nicht-negativen Eintrag hat.
    """
    a, b_k, delta_k = _values(a), _values(b_k), _values(delta_k)
    if np.any(a >= 0):
        raise ContractError("discretize: A muss elementweise strikt negativ sein")
    dk = delta_k[..., :, None]
    z = dk * a
    a_bar = np.exp(z)
    b_bar = _zoh_factor(z) * dk * b_k[..., None, :]
    return a_bar, b_bar


def _scan_core(
    u: Tensor,
    delta: Tensor,
    a: Tensor,
    b: Tensor,
    c: Tensor,
    skip: Optional[Tensor],
) -> Tensor:
    """Sequentielle Rekurrenz als ein Bandknoten mit handgeschriebenem BPTT."""
    *lead, seq, d_inner = u.shape
    d_state = a.shape[-1]
    ud = u.data.reshape(-1, seq, d_inner)
    dd = delta.data.reshape(-1, seq, d_inner)
    bd = b.data.reshape(-1, seq, d_state)
    cd = c.data.reshape(-1, seq, d_state)
    batch = ud.shape[0]

    h = np.zeros((batch, d_inner, d_state), dtype=u.dtype)
    states = np.empty((batch, seq, d_inner, d_state), dtype=u.dtype)
    v = np.empty_like(ud)
    for k in range(seq):
        a_bar, b_bar = discretize(a, bd[:, k], dd[:, k])
        h = a_bar * h + b_bar * ud[:, k, :, None]
        states[:, k] = h
        v[:, k] = np.einsum("bdn,bn->bd", h, cd[:, k])
    if skip is not None:
        v = v + skip.data * ud
    parents = (u, delta, a, b, c) + ((skip,) if skip is not None else ())
    out = record(v.reshape(u.shape), parents, "selective_scan")

    def _backward() -> None:
        gv = out.grad.reshape(batch, seq, d_inner)
        gu = np.zeros_like(ud)
        gdelta = np.zeros_like(dd)
        gb = np.zeros_like(bd)
        gc = np.zeros_like(cd)
        ga = np.zeros_like(a.data)
        carry = np.zeros((batch, d_inner, d_state), dtype=u.dtype)
        zeros = np.zeros_like(carry)
        for k in range(seq - 1, -1, -1):
            h_k = states[:, k]
            h_prev = states[:, k - 1] if k > 0 else zeros
            dk = dd[:, k][:, :, None]
            bk = bd[:, k][:, None, :]
            gc[:, k] = np.einsum("bd,bdn->bn", gv[:, k], h_k)
            gh = carry + gv[:, k][:, :, None] * cd[:, k][:, None, :]
            z = dk * a.data
            a_bar = np.exp(z)
            phi = _zoh_factor(z)
            carry = gh * a_bar
            g_bbar = gh * ud[:, k][:, :, None]
            gu[:, k] += (gh * phi * dk * bk).sum(axis=-1)
            gdelta[:, k] += (g_bbar * phi * bk).sum(axis=-1)
            gb[:, k] += (g_bbar * phi * dk).sum(axis=1)
            gz = gh * h_prev * a_bar + g_bbar * dk * bk * _zoh_factor_grad(z)
            gdelta[:, k] += (gz * a.data).sum(axis=-1)
            ga += (gz * dk).sum(axis=0)
        if skip is not None:
            gu += gv * skip.data
            skip.accumulate((gv * ud).reshape(-1, d_inner).sum(axis=0))
        u.accumulate(gu.reshape(u.shape))
        delta.accumulate(gdelta.reshape(delta.shape))
        a.accumulate(ga)
        b.accumulate(gb.reshape(b.shape))
        c.accumulate(gc.reshape(c.shape))

    out._backward = _backward
    return out


def selective_scan(u: Tensor, params: SsmParams) -> Tensor:
    """Selektiver Scan über die vorletzte Achse von u [..., seq, D].

    h_0 = 0; h_k = Ā_k h_{k-1} + B̄_k u_k; v_k = C_k h_k + skip_d * u_k.
    Voll differenzierbar (Backprop durch die Zeit).
    """
    if u.data.ndim < 2 or u.shape[-1] != params.d_inner:
        raise DimensionError(
            f"selective_scan: Eingabe {list(u.shape)} passt nicht zu D={params.d_inner}"
        )
    b, c, delta = selectivity(u, params)
    return _scan_core(u, delta, params.state_matrix(), b, c, params.skip_d)


def scan_oracle(u, params: SsmParams) -> np.ndarray:
    """Unabhängige Referenz: ausgerollte Produkt-Summe.

    v_k = sum_{j<=k} C_k (prod_{i=j+1..k} Ā_i) B̄_j u_j + skip_d u_k, ohne
    gemeinsamen Code mit selective_scan (eigene Projektionen, eigenes ZOH).
    """
    x = np.asarray(_values(u), dtype=np.float64)
    lead = x.shape[:-2]
    seq, d_inner = x.shape[-2:]
    rows = x.reshape(-1, seq, d_inner)
    a = -np.exp(params.a_log.data.astype(np.float64))
    w_b = params.w_b.data.astype(np.float64)
    w_c = params.w_c.data.astype(np.float64)
    w_down = params.w_delta_down.data.astype(np.float64)
    w_up = params.w_delta_up.data.astype(np.float64)
    bias = params.delta_bias.data.astype(np.float64)
    skip = None if params.skip_d is None else params.skip_d.data.astype(np.float64)

    result = np.zeros_like(rows)
    for r, seq_u in enumerate(rows):
        pre = (seq_u @ w_down) @ w_up + bias
        deltas = np.logaddexp(0.0, pre)
        a_bars, b_bars = [], []
        for k in range(seq):
            z = np.outer(deltas[k], np.ones(a.shape[1])) * a
            near_zero = np.abs(z) < SERIES_THRESHOLD
            ratio = np.ones_like(z)
            ratio[~near_zero] = np.expm1(z[~near_zero]) / z[~near_zero]
            ratio[near_zero] = 1.0 + z[near_zero] / 2.0 + z[near_zero] ** 2 / 6.0
            a_bars.append(np.exp(z))
            b_bars.append(ratio * deltas[k][:, None] * (seq_u[k] @ w_b)[None, :])
        for k in range(seq):
            c_k = seq_u[k] @ w_c
            acc = np.zeros_like(a)
            decay = np.ones_like(a)
            for j in range(k, -1, -1):
                acc += decay * b_bars[j] * seq_u[j][:, None]
                decay = decay * a_bars[j]
            result[r, k] = acc @ c_k
            if skip is not None:
                result[r, k] += skip * seq_u[k]
    return result.reshape(lead + (seq, d_inner))
