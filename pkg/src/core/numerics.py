"""Numerik-Kern: dichter Tensor mit Reverse-Mode-Autodiff.

Jede Operation erzeugt einen neuen Tensor, merkt sich ihre Eltern und eine
Rückwärts-Closure. backward() läuft das Band in umgekehrter topologischer
Reihenfolge ab und akkumuliert Gradienten (+=) in die Blätter.

Speicher ist immer row-major (C-contiguous); transpose() materialisiert eine
Kopie. float64 ist der Verifikations-Dialekt, float32 ist fürs Training
erlaubt und läuft über dieselben Codepfade.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from src.core.errors import ConfigError, ContractError, DimensionError, NumericalError

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def _as_array(data, dtype=None) -> np.ndarray:
    """Wandelt beliebige Eingaben in ein C-contiguous Float-Array."""
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in FLOAT_DTYPES:
        arr = arr.astype(np.float64)
    if not arr.flags.c_contiguous:
        arr = arr.copy(order="C")
    return arr


class Tensor:
    """Dichter n-dimensionaler Float-Tensor und zugleich Knoten des Bandes.

    Attributes:
        data: Werte als numpy-Array (row-major).
        grad: Gradienten-Akkumulator, gleiche Shape wie data (lazy angelegt).
        requires_grad: Ob Gradienten zu diesem Knoten fließen.
        op: Operations-Tag (Blätter: "leaf").
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        dtype=None,
        op: str = "leaf",
        parents: tuple = (),
    ) -> None:
        self.data = _as_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple = parents
        self._backward: Callable[[], None] = _noop

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def accumulate(self, grad: np.ndarray) -> None:
        """Addiert einen Gradientenbeitrag (nur wenn requires_grad)."""
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad.astype(self.data.dtype, copy=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    # Operator-Kurzformen für lesbaren Modellcode
    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)


def _noop() -> None:
    return None


def lift(value: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    """Macht aus Skalaren/Arrays konstante Tensoren (dtype wie `like`)."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def record(data: np.ndarray, parents: Iterable[Tensor], op: str) -> Tensor:
    """Legt einen neuen Bandknoten an und prüft die Endlichkeit.

    Raises:
        NumericalError: Wenn die Operation NaN oder Inf erzeugt hat.
    """
    if not np.isfinite(data).all():
        raise NumericalError(f"Nicht-endlicher Wert nach Operation '{op}'")
    parents = tuple(parents)
    requires = any(p.requires_grad for p in parents)
    return Tensor(
        data,
        requires_grad=requires,
        op=op,
        parents=parents if requires else (),
    )


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Summiert einen gebroadcasteten Gradienten zurück auf `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(
            f"{op}: Shapes {list(a.shape)} und {list(b.shape)} sind nicht kompatibel"
        ) from None


# --- Elementweise Operationen ---

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = lift(a, b if isinstance(b, Tensor) else None)
    b = lift(b, a)
    _check_broadcast(a, b, "add")
    out = record(a.data + b.data, (a, b), "add")

    def _backward() -> None:
        a.accumulate(_unbroadcast(out.grad, a.shape))
        b.accumulate(_unbroadcast(out.grad, b.shape))

    out._backward = _backward
    return out


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = lift(a, b if isinstance(b, Tensor) else None)
    b = lift(b, a)
    _check_broadcast(a, b, "sub")
    out = record(a.data - b.data, (a, b), "sub")

    def _backward() -> None:
        a.accumulate(_unbroadcast(out.grad, a.shape))
        b.accumulate(_unbroadcast(-out.grad, b.shape))

    out._backward = _backward
    return out


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = lift(a, b if isinstance(b, Tensor) else None)
    b = lift(b, a)
    _check_broadcast(a, b, "mul")
    out = record(a.data * b.data, (a, b), "mul")

    def _backward() -> None:
        a.accumulate(_unbroadcast(out.grad * b.data, a.shape))
        b.accumulate(_unbroadcast(out.grad * a.data, b.shape))

    out._backward = _backward
    return out


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = lift(a, b if isinstance(b, Tensor) else None)
    b = lift(b, a)
    _check_broadcast(a, b, "div")
    out = record(a.data / b.data, (a, b), "div")

    def _backward() -> None:
        a.accumulate(_unbroadcast(out.grad / b.data, a.shape))
        b.accumulate(_unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape))

    out._backward = _backward
    return out


def neg(x: Tensor) -> Tensor:
    out = record(-x.data, (x,), "neg")

    def _backward() -> None:
        x.accumulate(-out.grad)

    out._backward = _backward
    return out


def exp(x: Tensor) -> Tensor:
    out = record(np.exp(x.data), (x,), "exp")

    def _backward() -> None:
        x.accumulate(out.grad * out.data)

    out._backward = _backward
    return out


def absolute(x: Tensor) -> Tensor:
    """|x| mit Subgradient 0 bei x = 0."""
    out = record(np.abs(x.data), (x,), "abs")

    def _backward() -> None:
        x.accumulate(out.grad * np.sign(x.data))

    out._backward = _backward
    return out


def _sigmoid_values(values: np.ndarray) -> np.ndarray:
    # overflow-frei: 1/(1+e^-x) = exp(-log(1+e^-x))
    return np.exp(-np.logaddexp(0.0, -values))


def sigmoid(x: Tensor) -> Tensor:
    out = record(_sigmoid_values(x.data), (x,), "sigmoid")

    def _backward() -> None:
        s = out.data
        x.accumulate(out.grad * s * (1.0 - s))

    out._backward = _backward
    return out


def silu(x: Tensor) -> Tensor:
    """SiLU: x * sigmoid(x)."""
    s = _sigmoid_values(x.data)
    out = record(x.data * s, (x,), "silu")

    def _backward() -> None:
        x.accumulate(out.grad * s * (1.0 + x.data * (1.0 - s)))

    out._backward = _backward
    return out


def softplus(x: Tensor) -> Tensor:
    """ln(1+e^x) in der überlauffreien Form max(x,0) + ln(1+e^-|x|)."""
    values = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))
    out = record(values, (x,), "softplus")

    def _backward() -> None:
        x.accumulate(out.grad * _sigmoid_values(x.data))

    out._backward = _backward
    return out


# --- Lineare Abbildungen ---

def matmul(x: Tensor, weight: Tensor) -> Tensor:
    """x[..., d_in] @ W[d_in, d_out] über die letzte Achse."""
    if weight.data.ndim != 2 or x.data.ndim < 1 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(
            f"matmul: Eingabe {list(x.shape)} passt nicht zu Gewicht {list(weight.shape)}"
        )
    lead = x.shape[:-1]
    flat = x.data.reshape(-1, x.shape[-1])
    out = record((flat @ weight.data).reshape(lead + (weight.shape[1],)), (x, weight), "matmul")

    def _backward() -> None:
        g = out.grad.reshape(-1, weight.shape[1])
        x.accumulate((g @ weight.data.T).reshape(x.shape))
        weight.accumulate(flat.T @ g)

    out._backward = _backward
    return out


def affine(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """y[..., j] = sum_i x[..., i] * W[i, j] + b[j]."""
    y = matmul(x, weight)
    if bias is None:
        return y
    if bias.shape != (weight.shape[1],):
        raise DimensionError(
            f"affine: Bias {list(bias.shape)} passt nicht zu Gewicht {list(weight.shape)}"
        )
    return add(y, bias)


def causal_conv1d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Depthwise kausale Faltung über die vorletzte Achse.

    y[t, c] = bias[c] + sum_j kernel[j, c] * x[t - w + 1 + j, c], links mit
    Nullen aufgefüllt. Kernelbreite > Sequenzlänge ist erlaubt.
    """
    if x.data.ndim < 2:
        raise DimensionError(f"causal_conv1d: Eingabe {list(x.shape)} braucht [..., seq, d]")
    width, channels = kernel.shape
    if x.shape[-1] != channels or bias.shape != (channels,):
        raise DimensionError(
            f"causal_conv1d: Eingabe {list(x.shape)}, Kernel {list(kernel.shape)}, "
            f"Bias {list(bias.shape)} inkonsistent"
        )
    seq = x.shape[-2]
    padded = np.zeros(x.shape[:-2] + (seq + width - 1, channels), dtype=x.dtype)
    padded[..., width - 1:, :] = x.data
    values = np.broadcast_to(bias.data, x.shape).copy()
    for j in range(width):
        values += kernel.data[j] * padded[..., j:j + seq, :]
    out = record(values, (x, kernel, bias), "causal_conv1d")

    def _backward() -> None:
        g = out.grad
        grad_padded = np.zeros_like(padded)
        grad_kernel = np.empty_like(kernel.data)
        for j in range(width):
            grad_padded[..., j:j + seq, :] += g * kernel.data[j]
            grad_kernel[j] = (g * padded[..., j:j + seq, :]).reshape(-1, channels).sum(axis=0)
        x.accumulate(grad_padded[..., width - 1:, :])
        kernel.accumulate(grad_kernel)
        bias.accumulate(g.reshape(-1, channels).sum(axis=0))

    out._backward = _backward
    return out


def dropout(
    x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator] = None
) -> Tensor:
    """Inverted Dropout: im Training Maske * 1/(1-p), sonst Identität.

    Raises:
        ConfigError: Bei p außerhalb von [0, 1).
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"Dropout-Rate muss in [0, 1) liegen, erhalten: {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout im Training braucht einen Zufallsgenerator")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return mul(x, Tensor(mask, dtype=x.dtype))


# --- Shape-Operationen ---

def transpose(x: Tensor) -> Tensor:
    """Vertauscht die letzten beiden Achsen (materialisierte Kopie)."""
    if x.data.ndim < 2:
        raise DimensionError(f"transpose: Eingabe {list(x.shape)} hat weniger als 2 Achsen")
    out = record(np.ascontiguousarray(np.swapaxes(x.data, -1, -2)), (x,), "transpose")

    def _backward() -> None:
        x.accumulate(np.swapaxes(out.grad, -1, -2))

    out._backward = _backward
    return out


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise DimensionError(f"reshape: {list(x.shape)} lässt sich nicht in {list(shape)} umformen")
    out = record(x.data.reshape(shape), (x,), "reshape")

    def _backward() -> None:
        x.accumulate(out.grad.reshape(x.shape))

    out._backward = _backward
    return out


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Verkettung entlang der letzten Achse."""
    tensors = list(tensors)
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise DimensionError(
                f"concat: führende Achsen {list(t.shape[:-1])} != {list(lead)}"
            )
    out = record(np.concatenate([t.data for t in tensors], axis=-1), tensors, "concat")
    bounds = np.cumsum([0] + [t.shape[-1] for t in tensors])

    def _backward() -> None:
        for t, start, stop in zip(tensors, bounds[:-1], bounds[1:]):
            t.accumulate(out.grad[..., start:stop])

    out._backward = _backward
    return out


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """Ausschnitt [start, stop) der letzten Achse."""
    if not 0 <= start < stop <= x.shape[-1]:
        raise DimensionError(f"slice_last: [{start}, {stop}) außerhalb von {list(x.shape)}")
    out = record(x.data[..., start:stop].copy(), (x,), "slice")

    def _backward() -> None:
        grad = np.zeros_like(x.data)
        grad[..., start:stop] = out.grad
        x.accumulate(grad)

    out._backward = _backward
    return out


def split(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Umkehrung von concat: teilt die letzte Achse in Stücke der Größen `sizes`."""
    if int(np.sum(sizes)) != x.shape[-1]:
        raise DimensionError(f"split: Größen {list(sizes)} ergeben nicht {x.shape[-1]}")
    parts, start = [], 0
    for size in sizes:
        parts.append(slice_last(x, start, start + size))
        start += size
    return parts


# --- Reduktionen ---

def reduce_sum(x: Tensor, axis: Optional[int] = None) -> Tensor:
    out = record(np.asarray(x.data.sum(axis=axis)), (x,), "sum")

    def _backward() -> None:
        g = out.grad if axis is None else np.expand_dims(out.grad, axis)
        x.accumulate(np.broadcast_to(g, x.shape))

    out._backward = _backward
    return out


def reduce_mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    out = record(np.asarray(x.data.mean(axis=axis)), (x,), "mean")

    def _backward() -> None:
        g = out.grad if axis is None else np.expand_dims(out.grad, axis)
        x.accumulate(np.broadcast_to(g / count, x.shape))

    out._backward = _backward
    return out


# --- Rückwärtsdurchlauf ---

def _topological_order(root: Tensor) -> list[Tensor]:
    """Post-Order über alle gradientenführenden Knoten (iterativ, ohne Rekursion)."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Reverse-Mode-Akkumulation von einer skalaren Wurzel aus.

    Zwischenknoten werden vor jedem Durchlauf genullt, Blätter (Parameter)
    akkumulieren: zweimal aufrufen ohne zero_grad verdoppelt die Gradienten.

    Raises:
        ContractError: Wenn die Wurzel nicht skalar ist.
    """
    if root.size != 1:
        raise ContractError(f"backward braucht eine skalare Wurzel, erhalten: {list(root.shape)}")
    if not root.requires_grad:
        return
    order = _topological_order(root)
    for node in order:
        if node._parents:
            node.grad = np.zeros_like(node.data)
    root.accumulate(np.ones_like(root.data))
    for node in reversed(order):
        if node._parents:
            node._backward()


# --- Parameter und Module ---

@dataclass
class Parameter:
    """Benannter, trainierbarer Tensor (z.B. "model/E1/weight")."""
    name: str
    tensor: Tensor
    trainable: bool = True

    def zero_grad(self) -> None:
        self.tensor.zero_grad()


class Module:
    """Minimaler Container für Parameter und Untermodule.

    Parameter werden über add_parameter/add_module registriert; parameters()
    liefert sie mit vollem Pfadnamen, lexikographisch sortiert.
    """

    def __init__(self) -> None:
        self._parameters: dict[str, Tensor] = {}
        self._modules: dict[str, "Module"] = {}

    def add_parameter(self, name: str, tensor: Tensor) -> Tensor:
        tensor.requires_grad = True
        self._parameters[name] = tensor
        return tensor

    def add_module(self, name: str, module: "Module") -> "Module":
        self._modules[name] = module
        return module

    def _named(self, prefix: str) -> Iterable[tuple[str, Tensor]]:
        for name, tensor in self._parameters.items():
            yield f"{prefix}/{name}", tensor
        for name, module in self._modules.items():
            yield from module._named(f"{prefix}/{name}")

    def parameters(self, prefix: str = "model") -> list[Parameter]:
        named = sorted(self._named(prefix), key=lambda item: item[0])
        return [Parameter(name=name, tensor=tensor) for name, tensor in named]

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()


def make_rng(seed: int) -> np.random.Generator:
    """Zufallsgenerator mit dokumentiertem Algorithmus (PCG64, numpy)."""
    return np.random.Generator(np.random.PCG64(seed))


def uniform(rng: np.random.Generator, shape: tuple, bound: float, dtype) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), dtype=dtype)


class Linear(Module):
    """Affine Abbildung d_in -> d_out mit Fan-in-skalierter Gleichverteilung."""

    def __init__(
        self,
        d_in: int,
        d_out: int,
        rng: np.random.Generator,
        dtype=np.float64,
        bias: bool = True,
    ) -> None:
        super().__init__()
        self.d_in = d_in
        self.d_out = d_out
        bound = 1.0 / np.sqrt(d_in)
        self.weight = self.add_parameter("weight", uniform(rng, (d_in, d_out), bound, dtype))
        self.bias = (
            self.add_parameter("bias", uniform(rng, (d_out,), bound, dtype)) if bias else None
        )

    def __call__(self, x: Tensor) -> Tensor:
        return affine(x, self.weight, self.bias)


# --- Gradientenprüfung ---

# Abstand des Vergleichsbodens zum Rundungsrauschen der Differenzenquotienten
GRADCHECK_NOISE_MARGIN = 1e6


def gradcheck(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
) -> float:
    """Vergleicht analytische Gradienten mit zentralen Differenzen.

    Args:
        fn: Berechnet eine skalare Zielgröße aus `inputs` (ohne Argumente).
        inputs: Blätter mit requires_grad=True, werden kurzzeitig in-place gestört.
        h: Schrittweite der zentralen Differenz.

    Returns:
        Größter relativer Fehler ||a - n|| / max(||a|| + ||n||, floor) über alle
        Eingaben. floor ist das Rundungsrauschen der zentralen Differenz
        (eps * |f| / h je Element) mal GRADCHECK_NOISE_MARGIN; Eingaben mit
        kleinerem Gradienten werden so absolut statt relativ verglichen.
    """
    for t in inputs:
        t.zero_grad()
    root = fn()
    noise = np.finfo(root.dtype).eps * max(abs(root.item()), 1.0) / h
    backward(root)
    analytic = [t.grad.copy() for t in inputs]

    worst = 0.0
    for t, grad_a in zip(inputs, analytic):
        grad_n = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        flat_n = grad_n.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            f_plus = fn().item()
            flat[i] = original - h
            f_minus = fn().item()
            flat[i] = original
            flat_n[i] = (f_plus - f_minus) / (2.0 * h)
        floor = GRADCHECK_NOISE_MARGIN * noise * np.sqrt(grad_a.size)
        denom = max(float(np.linalg.norm(grad_a) + np.linalg.norm(grad_n)), floor)
        worst = max(worst, float(np.linalg.norm(grad_a - grad_n)) / denom)
    return worst
