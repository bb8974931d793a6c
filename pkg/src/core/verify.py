"""Verifikationssuite für `verify`.

Jede Prüfung liefert ein CheckResult mit maximalem Fehler und Toleranz.
Die Orakel (gradcheck, scan_oracle) kommen aus der Bibliothek selbst, die
Test-Suite nutzt dieselben Funktionen.
"""

import logging
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from src.config.defaults import ModelConfig
from src.config.run_config import VerifyOptions
from src.core import ssm as ssm_module
from src.core.mamba import MambaBlock
from src.core.model import RevIN, TimeMachineModel, count_params, parameter_scaling
from src.core.numerics import (
    Tensor,
    absolute,
    add,
    affine,
    causal_conv1d,
    concat,
    div,
    dropout,
    exp,
    gradcheck,
    make_rng,
    mul,
    neg,
    reduce_mean,
    reduce_sum,
    reshape,
    sigmoid,
    silu,
    slice_last,
    softplus,
    split,
    sub,
    transpose,
)
from src.core.ssm import SsmParams, scan_oracle, selective_scan
from src.core.train import mse

logger = logging.getLogger(__name__)

GRAD_TOL = 1e-4
ORACLE_TOL = 1e-10
ROUNDTRIP_TOL = 1e-6
BRANCH_TOL = 1e-10


@dataclass
class CheckResult:
    """Ergebnis einer einzelnen Prüfung."""
    name: str
    passed: bool
    max_error: float
    tolerance: float
    seconds: float = 0.0
    detail: str = ""

    def __post_init__(self) -> None:
        # numpy-Skalare aus Vergleichen sind nicht JSON-serialisierbar
        self.passed = bool(self.passed)
        self.max_error = float(self.max_error)
        self.tolerance = float(self.tolerance)
        self.seconds = float(self.seconds)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "max_error": self.max_error,
            "tolerance": self.tolerance,
            "seconds": self.seconds,
            "detail": self.detail,
        }


def _leaf(rng: np.random.Generator, *shape: int, offset: float = 0.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) + offset, requires_grad=True)


def _weights(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    """Feste Gewichte für eine nicht-triviale skalare Zielgröße."""
    return rng.standard_normal(shape)


# --- Op-Gradienten ---

def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    """Je Op: (skalare Zielfunktion, Blätter)."""
    cases = {}

    x, w, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2), _leaf(rng, 2)
    cases["affine"] = (lambda x=x, w=w, b=b: reduce_mean(affine(x, w, b)), [x, w, b])

    for name, op in (("silu", silu), ("softplus", softplus), ("sigmoid", sigmoid), ("exp", exp)):
        v = _leaf(rng, 5)
        g = _weights(rng, (5,))
        cases[name] = (lambda v=v, g=g, op=op: reduce_sum(mul(op(v), g)), [v])

    a, c = _leaf(rng, 3, 2), _leaf(rng, 3, 2)
    cases["add"] = (lambda a=a, c=c: reduce_sum(mul(add(a, c), add(a, c))), [a, c])
    cases["mul"] = (lambda a=a, c=c: reduce_sum(mul(a, c)), [a, c])
    den = _leaf(rng, 3, 2, offset=3.0)
    cases["div"] = (lambda a=a, den=den: reduce_sum(div(a, den)), [a, den])
    g_sub = _weights(rng, (3, 2))
    cases["sub"] = (lambda a=a, c=c: reduce_sum(mul(sub(a, c), g_sub)), [a, c])
    cases["neg"] = (lambda a=a: reduce_sum(mul(neg(a), g_sub)), [a])
    # Abstand zum Knick bei 0 deutlich größer als die Schrittweite
    away = Tensor(np.sign(a.data) * (0.5 + np.abs(a.data)), requires_grad=True)
    cases["absolute"] = (lambda: reduce_sum(mul(absolute(away), g_sub)), [away])

    seq_x, kernel, bias = _leaf(rng, 6, 3), _leaf(rng, 2, 3), _leaf(rng, 3)
    g_conv = _weights(rng, (6, 3))
    cases["causal_conv1d"] = (
        lambda: reduce_sum(mul(causal_conv1d(seq_x, kernel, bias), g_conv)),
        [seq_x, kernel, bias],
    )

    m = _leaf(rng, 2, 3, 4)
    g_t = _weights(rng, (2, 4, 3))
    cases["transpose"] = (lambda: reduce_sum(mul(transpose(m), g_t)), [m])
    g_r = _weights(rng, (6, 4))
    cases["reshape"] = (lambda: reduce_sum(mul(reshape(m, (6, 4)), g_r)), [m])

    p, q = _leaf(rng, 2, 3), _leaf(rng, 2, 2)
    g_cat = _weights(rng, (2, 5))
    cases["concat"] = (lambda: reduce_sum(mul(concat([p, q]), g_cat)), [p, q])
    cases["reduce_mean"] = (lambda: reduce_mean(mul(p, p)), [p])
    g_row = _weights(rng, (3,))
    cases["reduce_sum_axis"] = (lambda: reduce_sum(mul(reduce_sum(mul(p, p), axis=0), g_row)), [p])
    g_slice = _weights(rng, (2, 2))
    cases["slice_last"] = (lambda: reduce_sum(mul(slice_last(p, 1, 3), g_slice)), [p])
    g_left, g_right = _weights(rng, (2, 1)), _weights(rng, (2, 4))

    def split_case() -> Tensor:
        left, right = split(concat([p, q]), [1, 4])
        return add(reduce_sum(mul(left, g_left)), reduce_sum(mul(right, g_right)))

    cases["split"] = (split_case, [p, q])
    return cases


def check_op_gradients(seeds: int) -> list[CheckResult]:
    worst: dict[str, float] = {}
    started = time.perf_counter()
    for seed in range(seeds):
        for name, (fn, inputs) in _op_cases(make_rng(seed)).items():
            worst[name] = max(worst.get(name, 0.0), gradcheck(fn, inputs))
    seconds = (time.perf_counter() - started) / max(len(worst), 1)
    return [
        CheckResult(f"gradcheck/{name}", err < GRAD_TOL, err, GRAD_TOL, seconds, f"{seeds} Seeds")
        for name, err in worst.items()
    ]


def check_dropout_expectation() -> CheckResult:
    ones = Tensor(np.ones(100_000))
    out = dropout(ones, 0.5, training=True, rng=make_rng(0))
    err = abs(float(out.data.mean()) - 1.0)
    return CheckResult("dropout/expectation", err <= 0.02, err, 0.02)


# --- SSM ---

def check_zoh_branches() -> CheckResult:
    """ZOH-Faktor und discretize knapp unter/über der Reihen-Umschaltstelle.

    Referenz ist (e^z - 1)/z am selben z; Ā und B̄ werden relativ zu
    exp(-Δ) und (1 - exp(-Δ)) B bei A = -1 verglichen.
    """
    threshold = ssm_module.SERIES_THRESHOLD
    worst = 0.0
    for z in (threshold * 0.999, threshold * 1.001, -threshold * 0.999, -threshold * 1.001):
        factor = float(ssm_module._zoh_factor(np.array([z]))[0])
        worst = max(worst, abs(factor - np.expm1(z) / z))
    a, b = np.array([[-1.0]]), np.array([1.0])
    for delta in (threshold * 0.999, threshold * 1.001, 0.5):
        a_bar, b_bar = ssm_module.discretize(a, b, np.array([delta]))
        expected_b = -np.expm1(-delta)
        worst = max(
            worst,
            abs(float(a_bar[0, 0]) - np.exp(-delta)),
            abs(float(b_bar[0, 0]) - expected_b) / expected_b,
        )
    return CheckResult("ssm/zoh_branches", worst < BRANCH_TOL, worst, BRANCH_TOL, detail=f"Schwelle {threshold:g}")


def check_scan_oracle(instances: int, seed: int = 0) -> CheckResult:
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(instances):
        seq = int(rng.integers(1, 65))
        d_inner = int(rng.integers(1, 9))
        d_state = int(rng.integers(1, 17))
        params = SsmParams(d_inner, d_state, rng)
        u = Tensor(rng.standard_normal((seq, d_inner)))
        fast = selective_scan(u, params).data
        worst = max(worst, float(np.max(np.abs(fast - scan_oracle(u, params)))))
    return CheckResult(
        "ssm/scan_vs_oracle", worst < ORACLE_TOL, worst, ORACLE_TOL, detail=f"{instances} Instanzen"
    )


def check_scan_gradients(seed: int = 0) -> CheckResult:
    rng = make_rng(seed)
    params = SsmParams(3, 4, rng)
    u = _leaf(rng, 6, 3)
    g = _weights(rng, (6, 3))
    inputs = [u] + [p.tensor for p in params.parameters()]
    err = gradcheck(lambda: reduce_sum(mul(selective_scan(u, params), g)), inputs)
    return CheckResult("ssm/gradcheck", err < GRAD_TOL, err, GRAD_TOL, detail="seq=6, D=3, N=4")


# --- Mamba und Modell ---

def check_mamba_gradients(seed: int = 0) -> CheckResult:
    rng = make_rng(seed)
    block = MambaBlock(3, rng, expand=1, d_state=2, conv_width=2)
    x = _leaf(rng, 4, 3)
    inputs = [x] + [p.tensor for p in block.parameters()]
    err = gradcheck(lambda: reduce_mean(block(x)), inputs)
    return CheckResult("mamba/gradcheck", err < GRAD_TOL, err, GRAD_TOL, detail="seq=4, d=3, N=2, w=2")


def toy_config(**changes) -> ModelConfig:
    """Kleinstes vollständiges Modell für Gradienten- und Äquivalenzprüfungen."""
    base = dict(lookback=8, horizon=4, channels=2, n1=8, n2=4, d_state=2, dropout=0.0, seed=7)
    base.update(changes)
    return ModelConfig(**base)


def check_model_gradients(seed: int = 0) -> CheckResult:
    rng = make_rng(seed)
    model = TimeMachineModel(toy_config())
    # Zufälliger RevIN-Affin-Anteil, damit auch dessen Pfad geprüft wird
    for p in model.parameters():
        if p.name.endswith("/gain"):
            p.tensor.data += 0.1 * rng.standard_normal(p.tensor.shape)
    x = Tensor(rng.standard_normal((1, 2, 8)))
    target = rng.standard_normal((1, 2, 4))
    inputs = [p.tensor for p in model.parameters()]
    err = gradcheck(lambda: mse(model(x), target), inputs)
    return CheckResult(
        "model/gradcheck", err < GRAD_TOL, err, GRAD_TOL, detail=f"{len(inputs)} Parameter-Tensoren"
    )


def check_revin_roundtrip(seed: int = 0) -> CheckResult:
    rng = make_rng(seed)
    revin = RevIN(3)
    x = Tensor(rng.standard_normal((4, 3, 16)) * 5.0 + 2.0)
    normed, state = revin.normalize(x)
    err = float(np.max(np.abs(revin.denormalize(normed, state).data - x.data)))
    return CheckResult("model/revin_roundtrip", err < ROUNDTRIP_TOL, err, ROUNDTRIP_TOL)


def _causality_error(fn: Callable[[Tensor], np.ndarray], x: np.ndarray, t: int) -> float:
    """Größte Änderung von y[..., :t, :] nach Störung von x[..., t, :]."""
    before = fn(Tensor(x))
    bumped = x.copy()
    bumped[..., t, :] += 1.0
    after = fn(Tensor(bumped))
    return float(np.max(np.abs(after[..., :t, :] - before[..., :t, :])))


def check_causality(seed: int = 0) -> list[CheckResult]:
    rng = make_rng(seed)
    x = rng.standard_normal((10, 3))
    kernel, bias = Tensor(rng.standard_normal((3, 3))), Tensor(rng.standard_normal(3))
    block = MambaBlock(3, rng, d_state=4, conv_width=2)
    conv_err = max(
        _causality_error(lambda v: causal_conv1d(v, kernel, bias).data, x, t) for t in range(1, 10)
    )
    mamba_err = max(_causality_error(lambda v: block(v).data, x, t) for t in range(1, 10))
    return [
        CheckResult("causality/conv", conv_err == 0.0, conv_err, 0.0),
        CheckResult("causality/mamba", mamba_err == 0.0, mamba_err, 0.0),
    ]


def check_parameter_scaling() -> list[CheckResult]:
    config = toy_config(lookback=96, horizon=96, channels=7, n1=32, n2=16, d_state=4)
    rows = parameter_scaling(config, [96, 192, 336])
    slope_err = max(
        abs((c2 - c1) - (l2 - l1) * config.n1) for (l1, c1), (l2, c2) in zip(rows, rows[1:])
    )
    horizon_err = abs(
        count_params(toy_config(lookback=96, horizon=192, channels=7, n1=32, n2=16, d_state=4))
        - count_params(config)
        - 96 * (2 * config.n1 + 1)
    )
    toy = toy_config()
    enumerated = sum(p.tensor.size for p in TimeMachineModel(toy).parameters())
    enum_err = abs(enumerated - count_params(toy))
    return [
        CheckResult("params/lookback_slope", slope_err == 0, float(slope_err), 0.0, detail="ΔL·n1 für L=96, 192, 336"),
        CheckResult("params/horizon_slope", horizon_err == 0, float(horizon_err), 0.0, detail="96·(2n1+1)"),
        CheckResult("params/enumeration", enum_err == 0, float(enum_err), 0.0, detail=f"{enumerated} Skalare"),
    ]


def check_mode_equivalence(seed: int = 0) -> CheckResult:
    """Bei M=1 ist die Umformung der Kanalunabhängigkeit wirkungslos."""
    x = Tensor(make_rng(seed).standard_normal((3, 1, 8)))
    mixing = TimeMachineModel(toy_config(channels=1, channel_mode="mixing"))
    independence = TimeMachineModel(toy_config(channels=1, channel_mode="independence"))
    out_mixing, out_independence = mixing(x).data, independence(x).data
    err = float(np.max(np.abs(out_mixing - out_independence)))
    return CheckResult(
        "model/m1_mode_equivalence", np.array_equal(out_mixing, out_independence), err, 0.0, detail="bitgleich"
    )


# --- Gesamtlauf ---

def _guarded(name: str, check: Callable[[], object]) -> list[CheckResult]:
    """Führt eine Prüfung aus; Ausnahmen werden zum Fehlschlag."""
    started = time.perf_counter()
    try:
        outcome = check()
    except Exception as e:
        logger.exception(f"Prüfung '{name}' mit Ausnahme abgebrochen")
        return [CheckResult(name, False, float("inf"), 0.0, time.perf_counter() - started, f"{type(e).__name__}: {e}")]
    results = outcome if isinstance(outcome, list) else [outcome]
    elapsed = time.perf_counter() - started
    for r in results:
        if r.seconds == 0.0:
            r.seconds = elapsed / len(results)
    return results


def run_verification(options: Optional[VerifyOptions] = None) -> list[CheckResult]:
    """Alle Prüfungen in fester Reihenfolge.

    Args:
        options: Umfang (Seeds, Scan-Instanzen); quick reduziert beides.

    Raises:
        ConfigError: Bei Seeds oder Scan-Instanzen unter 1.
    """
    options = (options or VerifyOptions()).validate()
    seeds = 1 if options.quick else options.seeds
    instances = min(options.scan_instances, 10) if options.quick else options.scan_instances
    checks: list[tuple[str, Callable[[], object]]] = [
        ("gradcheck/ops", lambda: check_op_gradients(seeds)),
        ("dropout/expectation", check_dropout_expectation),
        ("ssm/zoh_branches", check_zoh_branches),
        ("ssm/scan_vs_oracle", lambda: check_scan_oracle(instances)),
        ("ssm/gradcheck", check_scan_gradients),
        ("mamba/gradcheck", check_mamba_gradients),
        ("model/gradcheck", check_model_gradients),
        ("model/revin_roundtrip", check_revin_roundtrip),
        ("causality", check_causality),
        ("params", check_parameter_scaling),
        ("model/m1_mode_equivalence", check_mode_equivalence),
    ]
    results: list[CheckResult] = []
    for name, check in checks:
        logger.info(f"Prüfung: {name}")
        results.extend(_guarded(name, check))
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.warning(f"{len(failed)} Prüfung(en) fehlgeschlagen: {', '.join(failed)}")
    else:
        logger.info(f"Alle {len(results)} Prüfungen bestanden")
    return results
