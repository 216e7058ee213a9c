#!/usr/bin/env python3
"""
DeVLBert Numerics v1.0
Tensor denso float64 con diferenciación automática en modo reverso.

Cada operación diferenciable registra sus padres y una clausura de backward;
Tensor.backward() ordena el grafo topológicamente desde una pérdida escalar,
propaga gradientes y libera la cinta.

Uso:
  from numerics import Tensor, matmul, softmax
  w = Tensor(np.eye(2), requires_grad=True)
  loss = sum_(matmul(x, w))
  loss.backward()
"""

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import DimensionError, NumericError, ValidationError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_grad_state = threading.local()


def is_grad_enabled() -> bool:
    """La cinta es local a cada hilo."""
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Desactiva el registro de la cinta dentro del bloque (pasadas congeladas)."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    """Arreglo denso float64 con gradiente opcional."""

    def __init__(self, data: ArrayLike, requires_grad: bool = False, _op: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._op = _op

    # ----- propiedades -----

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def graph_node(self) -> Optional[str]:
        """Operación que produjo este tensor, None si es hoja o la cinta ya se liberó."""
        return self._op if self._backward is not None else None

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError("item", self.shape, ())
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            grad = _unbroadcast(grad, self.data.shape)
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64)
        else:
            self.grad = self.grad + grad

    # ----- backward -----

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """
        Propaga gradientes desde este tensor.

        Sin `grad` explícito el tensor debe ser escalar. Tras la pasada la cinta
        se libera: los nodos intermedios pierden padres y clausuras.
        """
        if not self.requires_grad:
            raise ValidationError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward", self.shape, ())
            grad = np.ones_like(self.data)

        order = _topological_order(self)
        self._accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

        for node in order:
            node._parents = ()
            node._backward = None

    # ----- operadores -----

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _topological_order(root: Tensor) -> List[Tensor]:
    """Orden topológico iterativo (grafos profundos no agotan la pila)."""
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
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


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Suma las dimensiones que numpy expandio por broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None], op: str) -> Tensor:
    out = Tensor(data, _op=op)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# =============================================================================
# Elementwise
# =============================================================================

def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(op, a.shape, b.shape) from None


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g / b.data)
        if b.requires_grad:
            b._accumulate(-g * a.data / (b.data * b.data))

    return _result(a.data / b.data, (a, b), backward, "div")


def scale(x: ArrayLike, factor: float) -> Tensor:
    x = as_tensor(x)
    factor = float(factor)

    def backward(g: np.ndarray) -> None:
        x._accumulate(g * factor)

    return _result(x.data * factor, (x,), backward, "scale")


def exp(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out_data = np.exp(x.data)

    def backward(g: np.ndarray) -> None:
        x._accumulate(g * out_data)

    return _result(out_data, (x,), backward, "exp")


def log(x: ArrayLike) -> Tensor:
    x = as_tensor(x)

    def backward(g: np.ndarray) -> None:
        x._accumulate(g / x.data)

    return _result(np.log(x.data), (x,), backward, "log")


def relu(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    mask = (x.data > 0).astype(np.float64)

    def backward(g: np.ndarray) -> None:
        x._accumulate(g * mask)

    return _result(x.data * mask, (x,), backward, "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: ArrayLike) -> Tensor:
    """GeLU, aproximación tanh."""
    x = as_tensor(x)
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    out_data = 0.5 * v * (1.0 + t)

    def backward(g: np.ndarray) -> None:
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * v ** 2)
        local = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner
        x._accumulate(g * local)

    return _result(out_data, (x,), backward, "gelu")


def relu_or_gelu(x: ArrayLike, activation: str = "gelu") -> Tensor:
    if activation == "gelu":
        return gelu(x)
    if activation == "relu":
        return relu(x)
    raise ValidationError(f"unknown activation '{activation}'")


# =============================================================================
# Forma y reducciones
# =============================================================================

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def transpose(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError("transpose", x.shape)

    def backward(g: np.ndarray) -> None:
        x._accumulate(g.T)

    return _result(x.data.T, (x,), backward, "transpose")


def reshape(x: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        out_data = x.data.reshape(shape)
    except ValueError:
        raise DimensionError("reshape", x.shape, tuple(shape)) from None

    def backward(g: np.ndarray) -> None:
        x._accumulate(g.reshape(x.shape))

    return _result(out_data, (x,), backward, "reshape")


def sum_(x: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def backward(g: np.ndarray) -> None:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return _result(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward, "sum")


def mean(x: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def mean_pool(x: ArrayLike, axis: int = 0) -> Tensor:
    """Promedio a lo largo de `axis`, conservando la dimensión (n x d -> 1 x d)."""
    return mean(x, axis=axis, keepdims=True)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ValidationError("concat of an empty list")
    try:
        out_data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise DimensionError("concat", *[p.shape for p in parts]) from None
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward(g: np.ndarray) -> None:
        for part, start, stop in zip(parts, bounds[:-1], bounds[1:]):
            if part.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(int(start), int(stop))
                part._accumulate(g[tuple(index)])

    return _result(out_data, parts, backward, "concat")


def take(x: ArrayLike, indices: Sequence[int], axis: int = 0) -> Tensor:
    """Selecciona indices a lo largo de un eje; los repetidos acumulan gradiente."""
    x = as_tensor(x)
    idx = np.asarray(list(indices), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[axis]):
        raise DimensionError("take", x.shape, (int(idx.max()) + 1,))

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        moved_full = np.moveaxis(full, axis, 0)
        np.add.at(moved_full, idx, np.moveaxis(g, axis, 0))
        x._accumulate(full)

    return _result(np.take(x.data, idx, axis=axis), (x,), backward, "take")


def gather_rows(x: ArrayLike, rows: Sequence[int]) -> Tensor:
    return take(x, rows, axis=0)


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    ids = list(ids)
    bad = [i for i in ids if not 0 <= int(i) < table.shape[0]]
    if bad:
        raise ValidationError(f"embedding ids out of range [0, {table.shape[0]}): {bad[:5]}")
    return gather_rows(table, ids)


# =============================================================================
# Softmax, normalización y pérdidas
# =============================================================================

def _softmax_array(v: np.ndarray, axis: int) -> np.ndarray:
    shifted = v - v.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax_array(v: np.ndarray, axis: int) -> np.ndarray:
    shifted = v - v.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("softmax received NaN input", {"shape": list(x.shape)})
    probs = _softmax_array(x.data, axis)

    def backward(g: np.ndarray) -> None:
        x._accumulate(probs * (g - (g * probs).sum(axis=axis, keepdims=True)))

    return _result(probs, (x,), backward, "softmax")


def log_softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    out_data = _log_softmax_array(x.data, axis)

    def backward(g: np.ndarray) -> None:
        probs = np.exp(out_data)
        x._accumulate(g - probs * g.sum(axis=axis, keepdims=True))

    return _result(out_data, (x,), backward, "log_softmax")


def layer_norm(x: ArrayLike, gain: ArrayLike, bias: ArrayLike, eps: float = 1e-5) -> Tensor:
    """LayerNorm sobre la última dimensión."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError("layer_norm", x.shape, gain.shape, bias.shape)

    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    normed = centered * inv_std

    def backward(g: np.ndarray) -> None:
        if gain.requires_grad:
            gain._accumulate((g * normed).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gn = g * gain.data
            dx = inv_std * (
                gn
                - gn.mean(axis=-1, keepdims=True)
                - normed * (gn * normed).mean(axis=-1, keepdims=True)
            )
            x._accumulate(dx)

    return _result(normed * gain.data + bias.data, (x, gain, bias), backward, "layer_norm")


def cross_entropy_soft(logits: ArrayLike, targets: ArrayLike) -> Tensor:
    """
    Media por filas de -sum_c t_c * log softmax(logits)_c.

    Cada fila de `targets` debe ser una distribución (suma 1 +- 1e-6).
    """
    logits = as_tensor(logits)
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=np.float64)
    if logits.ndim != 2 or t.shape != logits.shape:
        raise DimensionError("cross_entropy_soft", logits.shape, t.shape)
    row_sums = t.sum(axis=1)
    bad = np.where((np.abs(row_sums - 1.0) > 1e-6) | (t < 0).any(axis=1))[0]
    if bad.size:
        raise ValidationError(f"cross_entropy_soft: target rows {bad[:5].tolist()} are not distributions")

    n = logits.shape[0]
    log_probs = _log_softmax_array(logits.data, axis=1)
    value = -(t * log_probs).sum() / n

    def backward(g: np.ndarray) -> None:
        probs = np.exp(log_probs)
        logits._accumulate(g * (probs * t.sum(axis=1, keepdims=True) - t) / n)

    return _result(np.array(value), (logits,), backward, "cross_entropy_soft")


def one_hot(ids: Sequence[int], size: int) -> np.ndarray:
    out = np.zeros((len(ids), size))
    out[np.arange(len(ids)), list(ids)] = 1.0
    return out


def cross_entropy(logits: ArrayLike, target_ids: Sequence[int]) -> Tensor:
    logits = as_tensor(logits)
    return cross_entropy_soft(logits, one_hot(target_ids, logits.shape[1]))


def binary_cross_entropy_with_logits(logits: ArrayLike, labels: ArrayLike) -> Tensor:
    """BCE estable: max(z,0) - z*y + log(1 + exp(-|z|)), media sobre elementos."""
    logits = as_tensor(logits)
    y = np.broadcast_to(np.asarray(labels, dtype=np.float64), logits.shape)
    z = logits.data
    n = z.size
    value = (np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))).sum() / n

    def backward(g: np.ndarray) -> None:
        sig = 0.5 * (1.0 + np.tanh(0.5 * z))
        logits._accumulate(g * (sig - y) / n)

    return _result(np.array(value), (logits,), backward, "bce_logits")


def check_finite(x: Tensor, what: str) -> None:
    if not np.isfinite(x.data).all():
        raise NumericError(f"non-finite values in {what}", {"what": what, "shape": list(x.shape)})


# =============================================================================
# Parámetros e inicialización
# =============================================================================

@dataclass
class Parameter:
    """Tensor entrenable con nombre único dentro del modelo."""
    name: str
    tensor: Tensor


def truncated_normal(rng: np.random.Generator, shape: Tuple[int, ...], std: float = 0.02) -> np.ndarray:
    """Normal truncada a +-2 sigma (re-muestreo de los valores fuera de rango)."""
    values = rng.normal(0.0, std, size=shape)
    outside = np.abs(values) > 2 * std
    while outside.any():
        values[outside] = rng.normal(0.0, std, size=int(outside.sum()))
        outside = np.abs(values) > 2 * std
    return values


class ParameterStore:
    """Registro ordenado de parámetros; el orden de creación es el orden del optimizador."""

    def __init__(self):
        self._params: Dict[str, Parameter] = {}

    def create(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValidationError(f"duplicate parameter name '{name}'")
        tensor = Tensor(data, requires_grad=True)
        self._params[name] = Parameter(name=name, tensor=tensor)
        return tensor

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name].tensor

    def __len__(self) -> int:
        return len(self._params)

    def parameters(self) -> List[Parameter]:
        return list(self._params.values())

    def names(self) -> List[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for param in self._params.values():
            param.tensor.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.tensor.data.copy() for name, p in self._params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> List[str]:
        """Carga valores validando formas; devuelve los nombres cargados."""
        errors = []
        if strict:
            missing = sorted(set(self._params) - set(state))
            unexpected = sorted(set(state) - set(self._params))
            if missing:
                errors.append(f"missing parameters: {missing[:5]}")
            if unexpected:
                errors.append(f"unexpected parameters: {unexpected[:5]}")
        for name, value in state.items():
            if name in self._params and self._params[name].tensor.shape != tuple(value.shape):
                errors.append(f"{name}: shape {tuple(value.shape)} != {self._params[name].tensor.shape}")
        if errors:
            raise ValidationError(errors)
        loaded = []
        for name, value in state.items():
            if name in self._params:
                self._params[name].tensor.data = np.array(value, dtype=np.float64)
                loaded.append(name)
        return loaded


# =============================================================================
# Optimizadores
# =============================================================================

class SGD:
    """Descenso de gradiente con momentum opcional."""

    def __init__(self, parameters: Iterable[Parameter], lr: float = 1e-2, momentum: float = 0.0):
        self.parameters = list(parameters)
        self.lr = lr
        self.momentum = momentum
        self._velocity: Dict[str, np.ndarray] = {}

    def grad_norm(self) -> float:
        return math.sqrt(sum(float((p.tensor.grad ** 2).sum()) for p in self.parameters if p.tensor.grad is not None))

    def step(self) -> None:
        for param in self.parameters:
            grad = param.tensor.grad
            if grad is None:
                continue
            if self.momentum:
                v = self._velocity.get(param.name, np.zeros_like(grad))
                v = self.momentum * v + grad
                self._velocity[param.name] = v
                grad = v
            param.tensor.data = param.tensor.data - self.lr * grad

    def zero_grad(self) -> None:
        for param in self.parameters:
            param.tensor.grad = None


class Adam:
    """Adam con los valores por defecto estilo ViLBERT (lr 1e-4, betas 0.9/0.999, eps 1e-8)."""

    def __init__(
        self,
        parameters: Iterable[Parameter],
        lr: float = 1e-4,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        grad_clip: float = 0.0,
    ):
        self.parameters = list(parameters)
        names = [p.name for p in self.parameters]
        if len(names) != len(set(names)):
            raise ValidationError("optimizer received a parameter more than once")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.grad_clip = grad_clip
        self.step_count = 0
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}

    def grad_norm(self) -> float:
        total = 0.0
        for param in self.parameters:
            if param.tensor.grad is not None:
                total += float((param.tensor.grad ** 2).sum())
        return math.sqrt(total)

    def step(self) -> None:
        self.step_count += 1
        clip = 1.0
        if self.grad_clip > 0:
            norm = self.grad_norm()
            if norm > self.grad_clip:
                clip = self.grad_clip / norm
        bias1 = 1.0 - self.beta1 ** self.step_count
        bias2 = 1.0 - self.beta2 ** self.step_count
        for param in self.parameters:
            grad = param.tensor.grad
            if grad is None:
                continue
            grad = grad * clip
            m = self._m.get(param.name, np.zeros_like(grad))
            v = self._v.get(param.name, np.zeros_like(grad))
            m = self.beta1 * m + (1.0 - self.beta1) * grad
            v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
            self._m[param.name] = m
            self._v[param.name] = v
            update = self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            param.tensor.data = param.tensor.data - update

    def zero_grad(self) -> None:
        for param in self.parameters:
            param.tensor.grad = None


# =============================================================================
# Verificación por diferencias finitas
# =============================================================================

@dataclass
class GradCheckResult:
    max_relative_error: float
    worst_input: int
    worst_index: Tuple[int, ...]

    def ok(self, tolerance: float = 1e-4) -> bool:
        return self.max_relative_error <= tolerance


def gradient_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> GradCheckResult:
    """
    Compara el gradiente analítico de fn(*inputs) con diferencias centrales.

    Error relativo = |analítico - numérico| / max(1, |analítico|).
    """
    for tensor in inputs:
        tensor.grad = None
        tensor.data = np.ascontiguousarray(tensor.data)
    loss = fn(*inputs)
    loss.backward()
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs
    ]

    worst = GradCheckResult(0.0, -1, ())
    with no_grad():
        for k, tensor in enumerate(inputs):
            flat = tensor.data.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + h
                plus = fn(*inputs).item()
                flat[i] = original - h
                minus = fn(*inputs).item()
                flat[i] = original
                numeric = (plus - minus) / (2 * h)
                value = analytic[k].reshape(-1)[i]
                error = abs(value - numeric) / max(1.0, abs(value))
                if error > worst.max_relative_error:
                    worst = GradCheckResult(error, k, np.unravel_index(i, tensor.shape))
    return worst
