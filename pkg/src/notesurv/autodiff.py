"""Dense reverse-mode differentiation over numpy arrays.

Every primitive returns a :class:`Tensor` holding its parents and a
vector-Jacobian product.  :func:`backward` sorts the graph reachable from a
scalar loss into a :class:`Tape` and replays it in reverse.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class Tensor:
    """A float64 array node in the computation graph."""

    __slots__ = ("data", "parents", "vjp", "op", "name", "requires_grad", "grad")
    # make ndarray (op) Tensor defer to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, parents=(), vjp=None, op="leaf", name=None,
                 requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = tuple(parents)
        self.vjp = vjp
        self.op = op
        self.name = name
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape})"

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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / float(other))

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _node(data, parents, vjp, op):
    return Tensor(data, parents=parents, vjp=vjp, op=op)


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a!r} with {b!r}") from None


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
                 "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
                 "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)),
                 "div")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient passes only where the value was inside."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _node(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _node(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def selu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    neg_exp = np.exp(np.minimum(x.data, 0.0))
    out = SELU_LAMBDA * np.where(pos, x.data, SELU_ALPHA * (neg_exp - 1.0))
    slope = SELU_LAMBDA * np.where(pos, 1.0, SELU_ALPHA * neg_exp)
    return _node(out, (x,), lambda g: (g * slope,), "selu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def dropout(x, p: float, rng: np.random.Generator | None = None,
            training: bool = True) -> Tensor:
    """Inverted dropout: zero with probability ``p``, scale survivors by 1/(1-p)."""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


ACTIVATIONS = {"relu": relu, "selu": selu, "sigmoid": sigmoid}


# -- reductions and structure ------------------------------------------------

def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), vjp, "sum")


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod(
        [x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible operands {a!r} and {b!r}")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.data @ b.data, (a, b), vjp, "matmul")


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)
    return _node(np.swapaxes(x.data, -1, -2), (x,),
                 lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),),
                 "reshape")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(repr(t) for t in tensors)
        raise ShapeError(f"concat: mismatched operands {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)),
                 "concat")


def take(x, index) -> Tensor:
    """Basic or fancy indexing; gradients scatter-add back."""
    x = as_tensor(x)

    def vjp(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(x.data[index], (x,), vjp, "take")


def embedding(table, ids) -> Tensor:
    """Rows of ``table`` selected by an integer array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    return take(table, ids)


def softmax_rows(x, key_mask=None) -> Tensor:
    """Softmax over the last axis; masked-out keys get weight exactly zero.

    ``key_mask`` is boolean, broadcastable to ``x``, True for valid keys.
    Every row needs at least one valid key.
    """
    x = as_tensor(x)
    z = x.data
    if key_mask is not None:
        z = np.where(key_mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (x,), vjp, "softmax")


# -- tape and backward -------------------------------------------------------

class Tape:
    """Graph nodes reachable from an output, in topological order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order, seen = [], set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor, params: "ParamStore | None" = None,
             tape: Tape | None = None) -> dict[int, np.ndarray]:
    """Propagate d(loss)/d(node) through the tape.

    Leaf tensors with ``requires_grad`` accumulate into ``.grad``; if a
    ParamStore is given its gradient accumulators are filled (zeros for
    parameters the loss does not reach).
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape or Tape.record(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.vjp is None:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    if params is not None:
        params.collect()
    return grads


# -- parameters --------------------------------------------------------------

class ParamStore:
    """Named trainable tensors plus their gradient accumulators."""

    def __init__(self):
        self.tensors: OrderedDict[str, Tensor] = OrderedDict()
        self.grads: OrderedDict[str, np.ndarray] = OrderedDict()

    def __contains__(self, name):
        return name in self.tensors

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def add(self, name: str, value) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), name=name, requires_grad=True)
        self.tensors[name] = t
        self.grads[name] = np.zeros_like(t.data)
        return t

    def add_weight(self, name, shape, rng: np.random.Generator) -> Tensor:
        """Xavier-uniform initialised matrix; fans are the last two dims."""
        fan_in, fan_out = shape[-2], shape[-1]
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return self.add(name, rng.uniform(-bound, bound, size=shape))

    def add_bias(self, name, shape) -> Tensor:
        return self.add(name, np.zeros(shape))

    def collect(self):
        for name, t in self.tensors.items():
            self.grads[name] = (np.zeros_like(t.data) if t.grad is None
                                else np.array(t.grad))

    def zero_grad(self):
        for name, t in self.tensors.items():
            t.grad = None
            self.grads[name] = np.zeros_like(t.data)

    def values(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def load_values(self, values: dict[str, np.ndarray]):
        for k, v in values.items():
            v = np.asarray(v, dtype=np.float64)
            if v.shape != self.tensors[k].shape:
                raise ShapeError(f"parameter {k}: expected {self.tensors[k].shape}, got {v.shape}")
            self.tensors[k].data = v.copy()

    def to_dict(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "params": {k: {"shape": list(t.shape), "values": t.data.ravel().tolist()}
                       for k, t in self.tensors.items()},
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "ParamStore":
        if blob.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {blob.get('format_version')!r}")
        store = cls()
        for k, entry in blob["params"].items():
            store.add(k, np.array(entry["values"], dtype=np.float64).reshape(entry["shape"]))
        return store

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "ParamStore":
        return cls.from_dict(json.loads(Path(path).read_text()))


class Adam:
    """Adam with bias correction; gradients are zeroed after every step.

    ``group_lr`` maps a parameter-name prefix to its own learning rate.
    """

    def __init__(self, params: ParamStore, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 group_lr: dict[str, float] | None = None):
        self.params = params
        self.lr = lr
        self.group_lr = dict(group_lr or {})
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.tensors.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.tensors.items()}

    def step(self):
        for name, g in self.params.grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {name!r}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, tensor in self.params.tensors.items():
            g = self.params.grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / c1
            v_hat = self.v[name] / c2
            lr = next((v for k, v in self.group_lr.items() if name.startswith(k)), self.lr)
            tensor.data = tensor.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)
        self.params.zero_grad()


def grad_check(f: Callable[[ParamStore], Tensor], params: ParamStore,
               eps: float = 1e-5, names: Iterable[str] | None = None) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` must be deterministic in the parameter values.  Relative error per
    coordinate is |a - n| / max(1, |a|, |n|).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params.zero_grad()
    loss = f(params)
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("loss is not finite at the check point")
    backward(loss, params)
    worst = 0.0
    for name in (names or list(params)):
        tensor = params[name]
        analytic = params.grads[name]
        flat = tensor.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            up = f(params).item()
            flat[k] = orig - eps
            down = f(params).item()
            flat[k] = orig
            numeric = (up - down) / (2.0 * eps)
            a = analytic.reshape(-1)[k]
            if not (np.isfinite(numeric) and np.isfinite(a)):
                raise FloatingPointError(f"non-finite gradient at {name}[{k}]")
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
    params.zero_grad()
    return worst
