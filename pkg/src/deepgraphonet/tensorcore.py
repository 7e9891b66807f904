"""Dense float64 tensors with tape-based reverse-mode differentiation, plus Adam.

Every operation records its inputs and a closure producing the input
adjoints. ``Tensor.backward`` walks the recorded graph in reverse
topological order and accumulates gradients into leaf tensors created with
``requires_grad=True``. Gradients accumulate until explicitly zeroed
(``ParamStore.zero_grad`` or ``adam_step``).
"""
from __future__ import annotations

import contextlib
import threading
from collections import OrderedDict
from typing import Callable, Iterator

import numpy as np

from .errors import ContractError, DimensionError, DivergenceError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (evaluation, rollouts)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self, axis=None) -> Tensor:
        return tsum(self, axis)

    def mean(self, axis=None) -> Tensor:
        return tmean(self, axis)

    def backward(self) -> None:
        """Propagate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar output, got shape {self.shape}")
        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a, b) -> Tensor:
    """Batched matrix product of operands with ndim >= 2 (numpy broadcasting rules)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    # Fast paths fold batch axes into one 2-D GEMM; numpy's stacked matmul
    # loops over tiny matrices otherwise.
    if b.ndim == 2 and a.ndim > 2:
        return _matmul_right2d(a, b)
    if a.ndim == 2 and b.ndim > 2:
        return _matmul_left2d(a, b)

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward)


def _matmul_right2d(a: Tensor, b: Tensor) -> Tensor:
    k = a.shape[-1]
    a2 = a.data.reshape(-1, k)
    out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, b.shape[1])
        ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
        gb = a2.T @ g2 if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


def _matmul_left2d(a: Tensor, b: Tensor) -> Tensor:
    # out[..., i, j] = sum_k a[i, k] b[..., k, j]
    k = b.shape[-2]
    bt = np.moveaxis(b.data, -2, 0)
    rest = bt.shape[1:]
    b2 = bt.reshape(k, -1)
    out = np.moveaxis((a.data @ b2).reshape((a.shape[0],) + rest), 0, -2)

    def backward(g):
        g2 = np.moveaxis(g, -2, 0).reshape(a.shape[0], -1)
        ga = g2 @ b2.T if a.requires_grad else None
        gb = np.moveaxis((a.data.T @ g2).reshape((k,) + rest), 0, -2) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def take_rows(a: Tensor, idx) -> Tensor:
    """``a[idx]`` along axis 0 (rows may repeat; their gradients add up)."""
    idx = np.asarray(idx, dtype=np.intp)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def tsum(a: Tensor, axis=None) -> Tensor:
    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), backward)


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def tabs(a: Tensor) -> Tensor:
    # np.sign is 0 at 0: the subgradient of |x| at the kink is taken as 0.
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a: Tensor) -> Tensor:
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


ACTIVATIONS = ("relu", "tanh", "identity")


def activate(x, kind: str) -> Tensor:
    x = as_tensor(x)
    if kind == "relu":
        return relu(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "identity":
        return x
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def affine(W, b, x) -> Tensor:
    """``W @ x + b`` for W[q, p], b[q] and x[..., p] (leading axes are a batch)."""
    W, b, x = as_tensor(W), as_tensor(b), as_tensor(x)
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.ndim < 1 or x.shape[-1] != W.shape[1]:
        raise DimensionError(
            f"affine: W{list(W.shape)}, b{list(b.shape)}, x{list(x.shape)} do not conform")
    if x.ndim == 1:
        return add(reshape(matmul(reshape(x, (1, -1)), transpose(W)), (W.shape[0],)), b)
    return add(matmul(x, transpose(W)), b)


class ParamStore:
    """Named trainable tensors plus Adam moment estimates.

    All parameter values, gradients and moments live in flat buffers; the
    tensors hold views into them, so one Adam update is a handful of vector
    operations. The step counter is shared by all parameters.
    """

    def __init__(self):
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.step = 0
        self._flat = np.zeros(0)
        self._grad = np.zeros(0)
        self._m = np.zeros(0)
        self._v = np.zeros(0)
        self._slices: dict[str, slice] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(value, requires_grad=True)
        old = {k: (self.m[k].copy(), self.v[k].copy()) for k in self.params}
        self.params[name] = t
        self._rebuild(old)
        return t

    def _rebuild(self, moments: dict) -> None:
        sizes = [t.data.size for t in self.params.values()]
        total = sum(sizes)
        flat, grad = np.empty(total), np.empty(total)
        self._m, self._v = np.zeros(total), np.zeros(total)
        pos = 0
        for (k, t), n in zip(self.params.items(), sizes):
            sl = slice(pos, pos + n)
            self._slices[k] = sl
            flat[sl] = t.data.ravel()
            grad[sl] = t.grad.ravel()
            t.data = flat[sl].reshape(t.data.shape)
            t.grad = grad[sl].reshape(t.data.shape)
            if k in moments:
                self._m[sl], self._v[sl] = moments[k][0].ravel(), moments[k][1].ravel()
            pos += n
        self._flat, self._grad = flat, grad

    @property
    def m(self) -> dict[str, np.ndarray]:
        return {k: self._m[sl].reshape(self.params[k].shape) for k, sl in self._slices.items()}

    @property
    def v(self) -> dict[str, np.ndarray]:
        return {k: self._v[sl].reshape(self.params[k].shape) for k, sl in self._slices.items()}

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self) -> None:
        self._grad[...] = 0.0

    def values(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            v = np.asarray(values[k], dtype=np.float64)
            if v.shape != t.shape:
                raise DimensionError(f"parameter {k}: shape {v.shape} != {t.shape}")
            t.data[...] = v

    def copy(self) -> ParamStore:
        new = ParamStore()
        for k, t in self.params.items():
            new.params[k] = Tensor(t.data.copy(), requires_grad=True)
        new._rebuild({})
        new._m[...] = self._m
        new._v[...] = self._v
        new.step = self.step
        return new

    def num_parameters(self) -> int:
        return self._flat.size


def adam_step(store: ParamStore, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    """Apply one bias-corrected Adam update in place, then zero the gradients."""
    g = store._grad
    if not np.all(np.isfinite(g)):
        bad = next(k for k, t in store.items() if not np.all(np.isfinite(t.grad)))
        raise DivergenceError(f"non-finite gradient for parameter {bad!r}")
    store.step += 1
    t = store.step
    m, v = store._m, store._v
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    denom = np.sqrt(v / (1.0 - beta2 ** t))
    denom += eps
    store._flat -= (lr / (1.0 - beta1 ** t)) * m / denom
    g[...] = 0.0
    return store


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)
