"""Dense float64 tensors with tape-based reverse-mode differentiation and Adam.

Operations record themselves on the innermost active :class:`Tape`. With no
tape active (evaluation) nothing is recorded and the ops are plain numpy.
Broadcasting follows numpy rules; gradients are summed back to each input's
shape.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class UsageError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "frozen_rows")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        # rows of a table that the optimizer must never move (padding ids)
        self.frozen_rows: tuple[int, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar()

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def _raise_not_scalar():
    raise UsageError("item() needs a single-element tensor")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass
class Tape:
    """Ordered record of differentiable operations (inputs always precede outputs)."""

    nodes: list[_Node] = field(default_factory=list)

    def record(self, op: str, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        self.nodes.append(_Node(out, inputs, backward, op))

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)


_ACTIVE: list[Tape] = []

# Test-harness hook: op names whose backward rule gets deliberately perturbed.
_FAULTS: set[str] = set()


@contextlib.contextmanager
def inject_gradient_fault(op: str):
    """Corrupt the backward rule of ``op`` (scales its input adjoints by 1.01)."""
    _FAULTS.add(op)
    try:
        yield
    finally:
        _FAULTS.discard(op)


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs and bool(_ACTIVE))
    if out.requires_grad:
        if op in _FAULTS:
            inner = backward

            def backward(g, _inner=inner):
                return [None if x is None else 1.01 * x for x in _inner(g)]

        _ACTIVE[-1].record(op, out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    return _emit("relu", np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # two-branch form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _emit("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def softplus(a: Tensor) -> Tensor:
    return _emit("softplus", np.logaddexp(0.0, a.data), (a,),
                 lambda g: (g * _sigmoid(a.data),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _emit("exp", e, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log of non-positive value")
    return _emit("log", np.log(a.data), (a,), lambda g: (g / a.data,))


class DropoutStream:
    """Counter-based dropout masks: call ``k`` of run ``seed`` is a pure function of (seed, k)."""

    def __init__(self, seed: int):
        self.seed = int(seed) & ((1 << 64) - 1)
        self.counter = 0

    def keep_mask(self, shape: tuple[int, ...], p: float) -> np.ndarray:
        # (seed, call index) forms the 128-bit Philox key, so streams never overlap
        rng = np.random.Generator(np.random.Philox(key=(self.seed << 64) | self.counter))
        self.counter += 1
        return rng.random(shape) >= p


def dropout(a: Tensor, p: float, stream: DropoutStream | None, training: bool) -> Tensor:
    if not training or p == 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if stream is None:
        raise UsageError("training-mode dropout needs a DropoutStream")
    m = stream.keep_mask(a.shape, p) / (1.0 - p)
    return _emit("dropout", a.data * m, (a,), lambda g: (g * m,))


def elementwise(kind: str, *inputs, **kw) -> Tensor:
    """Dispatch by name: relu, sigmoid, add, mul, scale, dropout."""
    table = {"relu": relu, "sigmoid": sigmoid, "add": add, "mul": mul,
             "scale": scale, "dropout": dropout, "sub": sub, "softplus": softplus}
    try:
        fn = table[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    return fn(*inputs, **kw)


# ---------------------------------------------------------------- structural

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _emit("matmul", out, (a, b), back)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _emit("permute", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return permute(a, axes)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", out, (a,), back)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


def getitem(a: Tensor, key) -> Tensor:
    """Basic/advanced numpy indexing ``a[key]``."""

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _emit("getitem", a.data[key], (a,), back)


def gather(table: Tensor, idx) -> Tensor:
    """Row lookup ``table[idx]`` for an integer index array of any shape."""
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise TypeError("gather indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"index out of range for table with {table.shape[0]} rows")

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape((-1,) + table.shape[1:]))
        return (full,)

    return _emit("gather", table.data[idx], (table,), back)


# ---------------------------------------------------------------- composites

def softmax_rows(x: Tensor, mask_bias: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis, stabilised by the row max.

    ``mask_bias`` is a constant added before normalisation (e.g. -1e9 on padded keys).
    """
    if np.isnan(x.data).any():
        raise NumericError("softmax input contains NaN")
    z = x.data if mask_bias is None else x.data + mask_bias
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", s, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if d < 1 or gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return (dx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape))

    return _emit("layer_norm", out, (x, gain, bias), back)


_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gaussian_pdf(x, mu, sigma) -> Tensor:
    """Normal density N(x | mu, sigma); differentiable in all three arguments."""
    x, mu, sigma = as_tensor(x), as_tensor(mu), as_tensor(sigma)
    if np.any(sigma.data <= 0):
        raise ValueError("gaussian_pdf: sigma must be positive")
    z = (x.data - mu.data) / sigma.data
    p = _INV_SQRT_2PI / sigma.data * np.exp(-0.5 * z * z)

    def back(g):
        gz = g * p * z / sigma.data
        return (_unbroadcast(-gz, x.shape),
                _unbroadcast(gz, mu.shape),
                _unbroadcast(g * p * (z * z - 1.0) / sigma.data, sigma.shape))

    return _emit("gaussian_pdf", p, (x, mu, sigma), back)


def log_sigmoid(a: Tensor) -> Tensor:
    return neg(softplus(neg(a)))


# ---------------------------------------------------------------- backward

def backward(root: Tensor, tape: Tape) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every requires_grad leaf on ``tape``."""
    if root.data.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {root.shape}")
    adj: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    produced = {id(n.out) for n in tape.nodes}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = adj.pop(id(node.out), None)
        if g is None:
            continue
        for t, gt in zip(node.inputs, node.backward(g)):
            if gt is None or not t.requires_grad:
                continue
            key = id(t)
            if key in adj:
                adj[key] = adj[key] + gt
            else:
                adj[key] = gt
            if key not in produced:
                leaves[key] = t
    if id(root) not in produced and root.requires_grad:
        leaves[id(root)] = root
    for key, t in leaves.items():
        g = np.array(adj[key], dtype=np.float64)
        t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------- checking

def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], n_coords: int = 20,
               h: float = 1e-5, seed: int = 0, floor: float = 1.0) -> float:
    """Max over sampled coordinates of |analytic - central difference| / max(floor, |a|, |n|).

    ``f`` must rebuild the scalar from ``params`` on every call and be deterministic.
    Up to ``n_coords`` coordinates are drawn from each parameter.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        root = f()
    backward(root, tape)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        k = min(n_coords, flat.size)
        for i in rng.choice(flat.size, size=k, replace=False):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            ana = gflat[i]
            worst = max(worst, abs(ana - num) / max(floor, abs(ana), abs(num)))
    return worst


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update in place; gradients are zeroed afterwards."""
    for name, p in params.items():
        if p.grad is None:
            raise UsageError(f"parameter {name!r} has no gradient")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = np.asarray(p.grad, dtype=np.float64)
        if p.frozen_rows:
            g[list(p.frozen_rows)] = 0.0
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = np.zeros_like(p.data)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        adam_step(self.params, self.state)
